//! A small 3D-CNN with exact backpropagation.
//!
//! Activations are `C×T×H×W` volumes of `f64`. The ReLU backward rule is
//! chosen per call through [`ReluMode`]: `Standard` passes the gradient where
//! the cached pre-activation is positive, `Guided` additionally requires the
//! incoming gradient to be positive. The stored model is never mutated to
//! switch rules, so guided extraction and ordinary inference can share one
//! model concurrently.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr_normal::standard_normal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::optflow::argmax;
use crate::vidcore::{VideoShape, VideoTensor};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"M3DC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Box-Muller standard normal; keeps initialisation independent of
/// distribution-crate versions.
mod rand_distr_normal {
    use rand::Rng;

    pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
        let u1: f64 = 1.0 - rng.gen::<f64>();
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

/// A dense `C×T×H×W` activation volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub shape: [usize; 4],
    pub data: Vec<f64>,
}

impl Volume {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "{} values do not fill volume {shape:?}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Transposes a `T×C×H×W` video into `C×T×H×W`.
    pub fn from_video(v: &VideoTensor) -> Self {
        let s = v.shape();
        let plane = s.height * s.width;
        let mut data = vec![0.0; s.len()];
        for t in 0..s.frames {
            for c in 0..s.channels {
                let src = &v.data()[(t * s.channels + c) * plane..][..plane];
                let dst = &mut data[(c * s.frames + t) * plane..][..plane];
                for (d, &x) in dst.iter_mut().zip(src) {
                    *d = x as f64;
                }
            }
        }
        Self {
            shape: [s.channels, s.frames, s.height, s.width],
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The `C×H×W` slice at temporal index `t`.
    pub fn frame_slice(&self, t: usize) -> Vec<f64> {
        let [c, tt, h, w] = self.shape;
        let plane = h * w;
        let mut out = Vec::with_capacity(c * plane);
        for ch in 0..c {
            out.extend_from_slice(&self.data[(ch * tt + t) * plane..][..plane]);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum ReluMode {
    #[default]
    Standard,
    Guided,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d {
    pub in_ch: usize,
    pub out_ch: usize,
    /// `[t, h, w]` extents.
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    /// `out × in × kt × kh × kw`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaxPool3d {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    /// Row-major `out × in`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv3d(Conv3d),
    Relu,
    MaxPool3d(MaxPool3d),
    Flatten,
    Linear(Linear),
}

/// Valid output range along one axis for kernel offset `k`.
#[inline]
fn valid_range(n_in: usize, n_out: usize, stride: usize, pad: usize, k: usize) -> (usize, usize) {
    // input index = o*stride + k - pad must land in [0, n_in)
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let top = n_in as isize - 1 + pad as isize - k as isize;
    if top < 0 {
        return (0, 0);
    }
    let hi = ((top as usize) / stride + 1).min(n_out);
    (lo.min(hi), hi)
}

impl Conv3d {
    pub fn zeros(in_ch: usize, out_ch: usize, kernel: [usize; 3], stride: [usize; 3], padding: [usize; 3]) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
            weight: vec![0.0; out_ch * in_ch * kernel.iter().product::<usize>()],
            bias: vec![0.0; out_ch],
        }
    }

    fn out_shape(&self, s: [usize; 4]) -> Result<[usize; 4]> {
        if s[0] != self.in_ch {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {}",
                self.in_ch, s[0]
            )));
        }
        let mut out = [self.out_ch, 0, 0, 0];
        for a in 0..3 {
            let padded = s[a + 1] + 2 * self.padding[a];
            if padded < self.kernel[a] || self.stride[a] == 0 {
                return Err(Error::Shape(format!("conv kernel {:?} does not fit input {s:?}", self.kernel)));
            }
            out[a + 1] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }

    fn kernel_len(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Visits every (output, input, kernel tap) triple with its valid output
    /// box; `f(o, i, widx, in_base, out_base, ...)` handles the inner loops.
    fn for_each_tap(
        &self,
        in_shape: [usize; 4],
        out_shape: [usize; 4],
        mut f: impl FnMut(usize, usize, usize, [usize; 3], [(usize, usize); 3]),
    ) {
        let [kt, kh, kw] = self.kernel;
        for o in 0..self.out_ch {
            for i in 0..self.in_ch {
                for dt in 0..kt {
                    let rt = valid_range(in_shape[1], out_shape[1], self.stride[0], self.padding[0], dt);
                    if rt.0 >= rt.1 {
                        continue;
                    }
                    for dy in 0..kh {
                        let ry = valid_range(in_shape[2], out_shape[2], self.stride[1], self.padding[1], dy);
                        if ry.0 >= ry.1 {
                            continue;
                        }
                        for dx in 0..kw {
                            let rx = valid_range(in_shape[3], out_shape[3], self.stride[2], self.padding[2], dx);
                            if rx.0 >= rx.1 {
                                continue;
                            }
                            let widx = (((o * self.in_ch + i) * kt + dt) * kh + dy) * kw + dx;
                            f(o, i, widx, [dt, dy, dx], [rt, ry, rx]);
                        }
                    }
                }
            }
        }
    }

    fn forward(&self, x: &Volume) -> Result<Volume> {
        let os = self.out_shape(x.shape)?;
        let is = x.shape;
        let mut out = Volume::zeros(os);
        let (ot, oh, ow) = (os[1], os[2], os[3]);
        for o in 0..self.out_ch {
            out.data[o * ot * oh * ow..(o + 1) * ot * oh * ow].fill(self.bias[o]);
        }
        let [st, sy, sx] = self.stride;
        let [pt, py, px] = self.padding;
        self.for_each_tap(is, os, |o, i, widx, [dt, dy, dx], [rt, ry, rx]| {
            let w = self.weight[widx];
            if w == 0.0 {
                return;
            }
            for t in rt.0..rt.1 {
                let ti = t * st + dt - pt;
                for y in ry.0..ry.1 {
                    let yi = y * sy + dy - py;
                    let obase = ((o * ot + t) * oh + y) * ow;
                    let ibase = ((i * is[1] + ti) * is[2] + yi) * is[3];
                    if sx == 1 {
                        let xi0 = rx.0 + dx - px;
                        let n = rx.1 - rx.0;
                        let dst = &mut out.data[obase + rx.0..obase + rx.0 + n];
                        let src = &x.data[ibase + xi0..ibase + xi0 + n];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += w * s;
                        }
                    } else {
                        for xo in rx.0..rx.1 {
                            out.data[obase + xo] += w * x.data[ibase + xo * sx + dx - px];
                        }
                    }
                }
            }
        });
        Ok(out)
    }

    fn backward_input(&self, x_shape: [usize; 4], grad_out: &Volume) -> Volume {
        let os = grad_out.shape;
        let is = x_shape;
        let mut gi = Volume::zeros(is);
        let (ot, oh, ow) = (os[1], os[2], os[3]);
        let [st, sy, sx] = self.stride;
        let [pt, py, px] = self.padding;
        self.for_each_tap(is, os, |o, i, widx, [dt, dy, dx], [rt, ry, rx]| {
            let w = self.weight[widx];
            if w == 0.0 {
                return;
            }
            for t in rt.0..rt.1 {
                let ti = t * st + dt - pt;
                for y in ry.0..ry.1 {
                    let yi = y * sy + dy - py;
                    let obase = ((o * ot + t) * oh + y) * ow;
                    let ibase = ((i * is[1] + ti) * is[2] + yi) * is[3];
                    for xo in rx.0..rx.1 {
                        gi.data[ibase + xo * sx + dx - px] += w * grad_out.data[obase + xo];
                    }
                }
            }
        });
        gi
    }

    fn param_grads(&self, x: &Volume, grad_out: &Volume) -> (Vec<f64>, Vec<f64>) {
        let os = grad_out.shape;
        let is = x.shape;
        let (ot, oh, ow) = (os[1], os[2], os[3]);
        let per = ot * oh * ow;
        let db = (0..self.out_ch)
            .map(|o| grad_out.data[o * per..(o + 1) * per].iter().sum())
            .collect();
        let mut dw = vec![0.0; self.weight.len()];
        let [st, sy, sx] = self.stride;
        let [pt, py, px] = self.padding;
        self.for_each_tap(is, os, |o, i, widx, [dt, dy, dx], [rt, ry, rx]| {
            let mut acc = 0.0;
            for t in rt.0..rt.1 {
                let ti = t * st + dt - pt;
                for y in ry.0..ry.1 {
                    let yi = y * sy + dy - py;
                    let obase = ((o * ot + t) * oh + y) * ow;
                    let ibase = ((i * is[1] + ti) * is[2] + yi) * is[3];
                    for xo in rx.0..rx.1 {
                        acc += grad_out.data[obase + xo] * x.data[ibase + xo * sx + dx - px];
                    }
                }
            }
            dw[widx] = acc;
        });
        (dw, db)
    }
}

impl MaxPool3d {
    fn out_shape(&self, s: [usize; 4]) -> Result<[usize; 4]> {
        let mut out = [s[0], 0, 0, 0];
        for a in 0..3 {
            if s[a + 1] < self.kernel[a] || self.stride[a] == 0 {
                return Err(Error::Shape(format!("pool kernel {:?} does not fit input {s:?}", self.kernel)));
            }
            out[a + 1] = (s[a + 1] - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }

    /// For each output element, the flat index of the first maximum in its window.
    fn argmax_indices(&self, x: &Volume, os: [usize; 4]) -> Vec<usize> {
        let is = x.shape;
        let mut idx = Vec::with_capacity(os.iter().product());
        for c in 0..os[0] {
            for t in 0..os[1] {
                for y in 0..os[2] {
                    for xo in 0..os[3] {
                        let mut best = usize::MAX;
                        let mut best_v = f64::NEG_INFINITY;
                        for dt in 0..self.kernel[0] {
                            for dy in 0..self.kernel[1] {
                                for dx in 0..self.kernel[2] {
                                    let ti = t * self.stride[0] + dt;
                                    let yi = y * self.stride[1] + dy;
                                    let xi = xo * self.stride[2] + dx;
                                    let j = ((c * is[1] + ti) * is[2] + yi) * is[3] + xi;
                                    if best == usize::MAX || x.data[j] > best_v {
                                        best = j;
                                        best_v = x.data[j];
                                    }
                                }
                            }
                        }
                        idx.push(best);
                    }
                }
            }
        }
        idx
    }

    fn forward(&self, x: &Volume) -> Result<Volume> {
        let os = self.out_shape(x.shape)?;
        let data = self
            .argmax_indices(x, os)
            .into_iter()
            .map(|j| x.data[j])
            .collect();
        Ok(Volume { shape: os, data })
    }

    fn backward_input(&self, x: &Volume, grad_out: &Volume) -> Volume {
        let mut gi = Volume::zeros(x.shape);
        for (k, j) in self.argmax_indices(x, grad_out.shape).into_iter().enumerate() {
            gi.data[j] += grad_out.data[k];
        }
        gi
    }
}

impl Linear {
    pub fn zeros(in_features: usize, out_features: usize) -> Self {
        Self {
            in_features,
            out_features,
            weight: vec![0.0; in_features * out_features],
            bias: vec![0.0; out_features],
        }
    }

    fn forward(&self, x: &Volume) -> Result<Volume> {
        if x.len() != self.in_features {
            return Err(Error::Shape(format!(
                "linear expects {} features, got {}",
                self.in_features,
                x.len()
            )));
        }
        let data = (0..self.out_features)
            .map(|o| {
                let row = &self.weight[o * self.in_features..(o + 1) * self.in_features];
                self.bias[o] + row.iter().zip(&x.data).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect();
        Ok(Volume {
            shape: [self.out_features, 1, 1, 1],
            data,
        })
    }

    fn backward_input(&self, x_shape: [usize; 4], grad_out: &Volume) -> Volume {
        let mut gi = Volume::zeros(x_shape);
        for (o, &g) in grad_out.data.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &self.weight[o * self.in_features..(o + 1) * self.in_features];
            for (d, w) in gi.data.iter_mut().zip(row) {
                *d += g * w;
            }
        }
        gi
    }

    fn param_grads(&self, x: &Volume, grad_out: &Volume) -> (Vec<f64>, Vec<f64>) {
        let mut dw = vec![0.0; self.weight.len()];
        for (o, &g) in grad_out.data.iter().enumerate() {
            for (d, v) in dw[o * self.in_features..(o + 1) * self.in_features].iter_mut().zip(&x.data) {
                *d = g * v;
            }
        }
        (dw, grad_out.data.clone())
    }
}

impl Layer {
    pub fn out_shape(&self, s: [usize; 4]) -> Result<[usize; 4]> {
        match self {
            Layer::Conv3d(c) => c.out_shape(s),
            Layer::Relu => Ok(s),
            Layer::MaxPool3d(p) => p.out_shape(s),
            Layer::Flatten => Ok([s.iter().product(), 1, 1, 1]),
            Layer::Linear(l) => {
                if s.iter().product::<usize>() != l.in_features {
                    return Err(Error::Shape(format!(
                        "linear expects {} features, got shape {s:?}",
                        l.in_features
                    )));
                }
                Ok([l.out_features, 1, 1, 1])
            }
        }
    }

    pub fn forward(&self, x: &Volume) -> Result<Volume> {
        match self {
            Layer::Conv3d(c) => c.forward(x),
            Layer::Relu => Ok(Volume {
                shape: x.shape,
                data: x.data.iter().map(|&v| v.max(0.0)).collect(),
            }),
            Layer::MaxPool3d(p) => p.forward(x),
            Layer::Flatten => Ok(Volume {
                shape: [x.len(), 1, 1, 1],
                data: x.data.clone(),
            }),
            Layer::Linear(l) => l.forward(x),
        }
    }

    /// Gradient w.r.t. the layer input, given the cached input `x`.
    pub fn backward(&self, x: &Volume, grad_out: &Volume, mode: ReluMode) -> Volume {
        match self {
            Layer::Conv3d(c) => c.backward_input(x.shape, grad_out),
            Layer::Relu => {
                let data = x
                    .data
                    .iter()
                    .zip(&grad_out.data)
                    .map(|(&z, &g)| {
                        let pass = z > 0.0 && (mode == ReluMode::Standard || g > 0.0);
                        if pass {
                            g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                Volume { shape: x.shape, data }
            }
            Layer::MaxPool3d(p) => p.backward_input(x, grad_out),
            Layer::Flatten => Volume {
                shape: x.shape,
                data: grad_out.data.clone(),
            },
            Layer::Linear(l) => l.backward_input(x.shape, grad_out),
        }
    }

    /// `(dW, db)` for parametrised layers.
    pub fn param_grads(&self, x: &Volume, grad_out: &Volume) -> Option<(Vec<f64>, Vec<f64>)> {
        match self {
            Layer::Conv3d(c) => Some(c.param_grads(x, grad_out)),
            Layer::Linear(l) => Some(l.param_grads(x, grad_out)),
            _ => None,
        }
    }

    fn params_mut(&mut self) -> Option<(&mut Vec<f64>, &mut Vec<f64>)> {
        match self {
            Layer::Conv3d(c) => Some((&mut c.weight, &mut c.bias)),
            Layer::Linear(l) => Some((&mut l.weight, &mut l.bias)),
            _ => None,
        }
    }

    fn params(&self) -> Option<(&[f64], &[f64])> {
        match self {
            Layer::Conv3d(c) => Some((&c.weight, &c.bias)),
            Layer::Linear(l) => Some((&l.weight, &l.bias)),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv3d(_) => "conv3d",
            Layer::Relu => "relu",
            Layer::MaxPool3d(_) => "maxpool3d",
            Layer::Flatten => "flatten",
            Layer::Linear(_) => "linear",
        }
    }
}

/// Cached activations: `activations[0]` is the input, `activations[i + 1]`
/// the output of layer `i`.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub activations: Vec<Volume>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &[f64] {
        &self.activations.last().expect("trace is never empty").data
    }
}

/// A classifier over `T×C×H×W` clips.
#[derive(Debug, Clone, PartialEq)]
pub struct Model3D {
    layers: Vec<Layer>,
    input_shape: VideoShape,
    num_classes: usize,
    relu_mode: ReluMode,
}

/// Parameter gradients aligned with [`Model3D::layers`].
#[derive(Debug, Clone)]
pub struct ParamGrads(pub Vec<Option<(Vec<f64>, Vec<f64>)>>);

impl ParamGrads {
    fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            if let (Some((aw, ab)), Some((bw, bb))) = (a.as_mut(), b.as_ref()) {
                aw.iter_mut().zip(bw).for_each(|(x, y)| *x += y);
                ab.iter_mut().zip(bb).for_each(|(x, y)| *x += y);
            }
        }
    }
}

/// A model viewed under a specific ReLU backward rule.
#[derive(Debug, Clone, Copy)]
pub struct Scoped<'a> {
    model: &'a Model3D,
    mode: ReluMode,
}

impl Scoped<'_> {
    pub fn relu_mode(&self) -> ReluMode {
        self.mode
    }

    pub fn backward_input(&self, trace: &ForwardTrace, output_grad: &[f64]) -> Result<Volume> {
        let top = self.model.layers.len() - 1;
        self.model.backward_between(trace, top, 0, output_grad, self.mode)
    }
}

impl Model3D {
    pub fn new(layers: Vec<Layer>, input_shape: VideoShape, num_classes: usize) -> Result<Self> {
        let m = Self {
            layers,
            input_shape,
            num_classes,
            relu_mode: ReluMode::Standard,
        };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        let mut s = [
            self.input_shape.channels,
            self.input_shape.frames,
            self.input_shape.height,
            self.input_shape.width,
        ];
        for (i, l) in self.layers.iter().enumerate() {
            s = l
                .out_shape(s)
                .map_err(|e| Error::Shape(format!("layer {i} ({}): {e}", l.name())))?;
            if let Layer::Conv3d(c) = l {
                if c.weight.len() != c.out_ch * c.in_ch * c.kernel_len() || c.bias.len() != c.out_ch {
                    return Err(Error::Shape(format!("layer {i}: conv parameter count mismatch")));
                }
            }
            if let Layer::Linear(l) = l {
                if l.weight.len() != l.in_features * l.out_features || l.bias.len() != l.out_features {
                    return Err(Error::Shape(format!("layer {i}: linear parameter count mismatch")));
                }
            }
        }
        match self.layers.last() {
            Some(Layer::Linear(l)) if l.out_features == self.num_classes => Ok(()),
            _ => Err(Error::Shape(format!(
                "final layer must be linear with {} outputs",
                self.num_classes
            ))),
        }
    }

    /// Conv(8,3³) → ReLU → Pool(1×2×2) → Conv(16,3³) → ReLU → Pool(2³) →
    /// Flatten → Linear, with seeded fan-in scaled initialisation and zero
    /// biases.
    pub fn micro_c3d(input_shape: VideoShape, num_classes: usize, seed: u64) -> Result<Self> {
        let c = input_shape.channels;
        let mut layers = vec![
            Layer::Conv3d(Conv3d::zeros(c, 8, [3, 3, 3], [1, 1, 1], [1, 1, 1])),
            Layer::Relu,
            Layer::MaxPool3d(MaxPool3d {
                kernel: [1, 2, 2],
                stride: [1, 2, 2],
            }),
            Layer::Conv3d(Conv3d::zeros(8, 16, [3, 3, 3], [1, 1, 1], [1, 1, 1])),
            Layer::Relu,
            Layer::MaxPool3d(MaxPool3d {
                kernel: [2, 2, 2],
                stride: [2, 2, 2],
            }),
            Layer::Flatten,
        ];
        let mut s = [c, input_shape.frames, input_shape.height, input_shape.width];
        for l in &layers {
            s = l.out_shape(s)?;
        }
        layers.push(Layer::Linear(Linear::zeros(s[0], num_classes)));
        let mut m = Self::new(layers, input_shape, num_classes)?;
        m.init_params(seed);
        Ok(m)
    }

    /// Kaiming-normal hidden layers; the classifier head is scaled down so the
    /// initial softmax is close to uniform.
    pub fn init_params(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter_mut().enumerate() {
            let fan_in = match l {
                Layer::Conv3d(c) => c.in_ch * c.kernel_len(),
                Layer::Linear(l) => l.in_features,
                _ => continue,
            };
            let std = if i == last {
                (1.0 / fan_in as f64).sqrt() * 0.1
            } else {
                (2.0 / fan_in as f64).sqrt()
            };
            let (w, b) = l.params_mut().unwrap();
            w.iter_mut().for_each(|v| *v = std * standard_normal(&mut rng));
            b.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_shape(&self) -> VideoShape {
        self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// The rule used by the plain (unscoped) backward pass; always `Standard`.
    pub fn relu_mode(&self) -> ReluMode {
        self.relu_mode
    }

    pub fn scoped(&self, mode: ReluMode) -> Scoped<'_> {
        Scoped { model: self, mode }
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.params())
            .map(|(w, b)| w.len() + b.len())
            .sum()
    }

    fn check_input(&self, v: &VideoTensor) -> Result<()> {
        if v.shape() != self.input_shape {
            return Err(Error::Shape(format!(
                "model expects {}, got {}",
                self.input_shape,
                v.shape()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, v: &VideoTensor) -> Result<(Vec<f64>, ForwardTrace)> {
        self.check_input(v)?;
        let trace = self.forward_volume(Volume::from_video(v))?;
        Ok((trace.logits().to_vec(), trace))
    }

    pub fn forward_volume(&self, x: Volume) -> Result<ForwardTrace> {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x);
        for l in &self.layers {
            let next = l.forward(activations.last().unwrap())?;
            activations.push(next);
        }
        Ok(ForwardTrace { activations })
    }

    pub fn logits(&self, v: &VideoTensor) -> Result<Vec<f64>> {
        Ok(self.forward(v)?.0)
    }

    pub fn predict(&self, v: &VideoTensor) -> Result<usize> {
        Ok(predict_from_logits(&self.logits(v)?))
    }

    fn check_trace(&self, trace: &ForwardTrace) -> Result<()> {
        if trace.activations.len() != self.layers.len() + 1 {
            return Err(Error::Shape("stale trace: layer count differs".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.out_shape(trace.activations[i].shape).ok() != Some(trace.activations[i + 1].shape) {
                return Err(Error::Shape(format!("stale trace: shape mismatch at layer {i}")));
            }
        }
        Ok(())
    }

    /// Backpropagates `grad` given at the output of layer `top` down to the
    /// input of layer `bottom` (`top ≥ bottom`).
    pub fn backward_between(
        &self,
        trace: &ForwardTrace,
        top: usize,
        bottom: usize,
        grad: &[f64],
        mode: ReluMode,
    ) -> Result<Volume> {
        self.check_trace(trace)?;
        if top >= self.layers.len() || bottom > top {
            return Err(Error::InvalidArgument(format!(
                "bad layer range {bottom}..={top}"
            )));
        }
        let mut g = Volume::from_vec(trace.activations[top + 1].shape, grad.to_vec())?;
        for i in (bottom..=top).rev() {
            g = self.layers[i].backward(&trace.activations[i], &g, mode);
        }
        Ok(g)
    }

    /// `∂(output_grad · logits)/∂input` under the model's (standard) rule.
    pub fn backward_input(&self, trace: &ForwardTrace, output_grad: &[f64]) -> Result<Volume> {
        self.scoped(self.relu_mode).backward_input(trace, output_grad)
    }

    /// Parameter gradients of `output_grad · logits` (standard rule).
    pub fn backward_params(&self, trace: &ForwardTrace, output_grad: &[f64]) -> Result<ParamGrads> {
        self.check_trace(trace)?;
        let n = self.layers.len();
        let mut grads = vec![None; n];
        let mut g = Volume::from_vec(trace.activations[n].shape, output_grad.to_vec())?;
        for i in (0..n).rev() {
            let x = &trace.activations[i];
            grads[i] = self.layers[i].param_grads(x, &g);
            if i > 0 {
                g = self.layers[i].backward(x, &g, ReluMode::Standard);
            }
        }
        Ok(ParamGrads(grads))
    }

    /// Rounds every parameter to the nearest `f32`.
    pub fn round_params_to_f32(&mut self) {
        for l in &mut self.layers {
            if let Some((w, b)) = l.params_mut() {
                w.iter_mut().chain(b.iter_mut()).for_each(|v| *v = *v as f32 as f64);
            }
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|reason| Error::format(path, reason))
    }

    /// `M3DC` checkpoint: magic, version, classes, input `T,C,H,W`, layer
    /// table, then weights and biases of each parametrised layer as LE `f32`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let put = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put(&mut out, CHECKPOINT_VERSION as usize);
        put(&mut out, self.num_classes);
        let s = self.input_shape;
        for v in [s.frames, s.channels, s.height, s.width] {
            put(&mut out, v);
        }
        put(&mut out, self.layers.len());
        for l in &self.layers {
            match l {
                Layer::Conv3d(c) => {
                    put(&mut out, 0);
                    for v in [c.in_ch, c.out_ch]
                        .into_iter()
                        .chain(c.kernel)
                        .chain(c.stride)
                        .chain(c.padding)
                    {
                        put(&mut out, v);
                    }
                }
                Layer::Relu => put(&mut out, 1),
                Layer::MaxPool3d(p) => {
                    put(&mut out, 2);
                    for v in p.kernel.into_iter().chain(p.stride) {
                        put(&mut out, v);
                    }
                }
                Layer::Flatten => put(&mut out, 3),
                Layer::Linear(l) => {
                    put(&mut out, 4);
                    put(&mut out, l.in_features);
                    put(&mut out, l.out_features);
                }
            }
        }
        for (w, b) in self.layers.iter().filter_map(|l| l.params()) {
            for v in w.iter().chain(b) {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0usize;
        let mut word = || -> std::result::Result<usize, String> {
            let b = bytes.get(pos..pos + 4).ok_or("truncated checkpoint")?;
            pos += 4;
            Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
        };
        if bytes.get(..4) != Some(CHECKPOINT_MAGIC.as_slice()) {
            return Err("bad magic".into());
        }
        word()?;
        let version = word()?;
        if version != CHECKPOINT_VERSION as usize {
            return Err(format!("unsupported version {version}"));
        }
        let num_classes = word()?;
        let (t, c, h, w) = (word()?, word()?, word()?, word()?);
        let n_layers = word()?;
        if n_layers > 1024 {
            return Err("implausible layer count".into());
        }
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let layer = match word()? {
                0 => {
                    let (i, o) = (word()?, word()?);
                    let mut a = [0usize; 9];
                    for v in a.iter_mut() {
                        *v = word()?;
                    }
                    Layer::Conv3d(Conv3d::zeros(i, o, [a[0], a[1], a[2]], [a[3], a[4], a[5]], [a[6], a[7], a[8]]))
                }
                1 => Layer::Relu,
                2 => {
                    let mut a = [0usize; 6];
                    for v in a.iter_mut() {
                        *v = word()?;
                    }
                    Layer::MaxPool3d(MaxPool3d {
                        kernel: [a[0], a[1], a[2]],
                        stride: [a[3], a[4], a[5]],
                    })
                }
                3 => Layer::Flatten,
                4 => {
                    let (i, o) = (word()?, word()?);
                    Layer::Linear(Linear::zeros(i, o))
                }
                tag => return Err(format!("unknown layer tag {tag}")),
            };
            layers.push(layer);
        }
        let mut params = bytes[pos..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
        let expected: usize = layers
            .iter()
            .filter_map(|l| l.params())
            .map(|(w, b)| w.len() + b.len())
            .sum();
        if bytes.len() - pos != 4 * expected {
            return Err(format!(
                "parameter payload is {} bytes, layer table needs {}",
                bytes.len() - pos,
                4 * expected
            ));
        }
        for l in layers.iter_mut() {
            if let Some((w, b)) = l.params_mut() {
                for v in w.iter_mut().chain(b.iter_mut()) {
                    *v = params.next().unwrap();
                }
            }
        }
        Model3D::new(layers, VideoShape::new(t, c, h, w), num_classes).map_err(|e| e.to_string())
    }
}

/// Argmax with ties resolved to the smallest index.
pub fn predict_from_logits(logits: &[f64]) -> usize {
    argmax(logits)
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Cross-entropy of `softmax(logits)` against `label`, with its logit gradient
/// `softmax − onehot`.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let p = softmax(logits);
    let loss = if p[label].is_nan() {
        f64::NAN
    } else {
        -p[label].max(f64::MIN_POSITIVE).ln()
    };
    let mut g = p;
    g[label] -= 1.0;
    (loss, g)
}

/// A clip with its class index.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledClip {
    pub video: VideoTensor,
    pub label: usize,
}

/// A model wrapper that counts every inference, used for query accounting.
#[derive(Debug)]
pub struct CountedModel<'a> {
    model: &'a Model3D,
    calls: AtomicUsize,
}

impl<'a> CountedModel<'a> {
    pub fn new(model: &'a Model3D) -> Self {
        Self {
            model,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn predict(&self, v: &VideoTensor) -> Result<usize> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.model.predict(v)
    }

    pub fn logits(&self, v: &VideoTensor) -> Result<Vec<f64>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.model.logits(v)
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn model(&self) -> &Model3D {
        self.model
    }
}

/// Anything that labels a clip; lets metrics run against a counted victim.
pub trait Classifier: Sync {
    fn predict(&self, v: &VideoTensor) -> Result<usize>;
}

impl Classifier for Model3D {
    fn predict(&self, v: &VideoTensor) -> Result<usize> {
        Model3D::predict(self, v)
    }
}

impl Classifier for CountedModel<'_> {
    fn predict(&self, v: &VideoTensor) -> Result<usize> {
        CountedModel::predict(self, v)
    }
}

/// Single-channel or multi-channel map extracted from a model.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
    pub source_frame: usize,
    pub source_layer: usize,
}

impl GradientMap {
    pub fn max(&self) -> f32 {
        self.data.iter().cloned().fold(0.0, f32::max)
    }
}

fn check_class(m: &Model3D, class_idx: usize) -> Result<()> {
    if class_idx >= m.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "class {class_idx} out of range for {} classes",
            m.num_classes()
        )));
    }
    Ok(())
}

/// Full input gradient under the guided rule.
///
/// From the logits layer the seed is a one-hot at `class_idx`; from an inner
/// layer it is all-ones over that layer's output.
pub fn guided_gradient(m: &Model3D, v: &VideoTensor, layer: usize, class_idx: usize) -> Result<Volume> {
    check_class(m, class_idx)?;
    let last = m.layers().len() - 1;
    if layer > last {
        return Err(Error::InvalidArgument(format!(
            "layer {layer} out of range (model has {} layers)",
            last + 1
        )));
    }
    let (_, trace) = m.forward(v)?;
    let seed = if layer == last {
        let mut s = vec![0.0; m.num_classes()];
        s[class_idx] = 1.0;
        s
    } else {
        vec![1.0; trace.activations[layer + 1].len()]
    };
    let g = m.backward_between(&trace, layer, 0, &seed, ReluMode::Guided)?;
    if let Some(bad) = g.data.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("guided gradient contains {bad}")));
    }
    Ok(g)
}

/// Divides by `max|g|`, rectifies and clips into `[0, 1]`.
pub fn rectify_normalize(raw: &[f64]) -> Vec<f32> {
    let m = raw.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    raw.iter()
        .map(|&v| {
            let v = if m > 0.0 { v / m } else { 0.0 };
            v.clamp(0.0, 1.0) as f32
        })
        .collect()
}

/// Guided-backprop map of frame `t_star` for class `class_idx`, normalised
/// into `[0, 1]`.
pub fn guided_backprop(
    m: &Model3D,
    v_att: &VideoTensor,
    t_star: usize,
    layer: usize,
    class_idx: usize,
) -> Result<GradientMap> {
    if t_star >= v_att.frames() {
        return Err(Error::InvalidArgument(format!(
            "frame {t_star} out of range for {} frames",
            v_att.frames()
        )));
    }
    let g = guided_gradient(m, v_att, layer, class_idx)?;
    Ok(GradientMap {
        channels: v_att.channels(),
        height: v_att.height(),
        width: v_att.width(),
        data: rectify_normalize(&g.frame_slice(t_star)),
        source_frame: t_star,
        source_layer: layer,
    })
}

/// Rectified class-weighted activation maps of `conv_layer`, one per
/// temporal index of that layer, with their spatial size.
fn cam_slices(m: &Model3D, v: &VideoTensor, conv_layer: usize, class_idx: usize) -> Result<(Vec<Vec<f64>>, usize, usize)> {
    check_class(m, class_idx)?;
    if !matches!(m.layers().get(conv_layer), Some(Layer::Conv3d(_))) {
        return Err(Error::InvalidArgument(format!(
            "layer {conv_layer} is not a conv3d layer"
        )));
    }
    let (_, trace) = m.forward(v)?;
    let last = m.layers().len() - 1;
    let mut seed = vec![0.0; m.num_classes()];
    seed[class_idx] = 1.0;
    let act = &trace.activations[conv_layer + 1];
    let grad = m.backward_between(&trace, last, conv_layer + 1, &seed, ReluMode::Standard)?;
    let [k, t, h, w] = act.shape;
    let per = t * h * w;
    let weights: Vec<f64> = (0..k)
        .map(|c| grad.data[c * per..(c + 1) * per].iter().sum::<f64>() / per as f64)
        .collect();
    let slices = (0..t)
        .map(|tt| {
            (0..h * w)
                .map(|i| {
                    let s: f64 = (0..k).map(|c| weights[c] * act.data[c * per + tt * h * w + i]).sum();
                    s.max(0.0)
                })
                .collect()
        })
        .collect();
    Ok((slices, h, w))
}

fn cam_to_map(cam: &[f64], h: usize, w: usize, v: &VideoTensor, frame: usize, layer: usize) -> GradientMap {
    let (oh, ow) = (v.height(), v.width());
    let up = upsample_bilinear(cam, h, w, oh, ow);
    let mx = up.iter().cloned().fold(0.0f64, f64::max);
    let data = up
        .iter()
        .map(|&x| if mx > 0.0 { (x / mx).clamp(0.0, 1.0) as f32 } else { 0.0 })
        .collect();
    GradientMap {
        channels: 1,
        height: oh,
        width: ow,
        data,
        source_frame: frame,
        source_layer: layer,
    }
}

/// Grad-CAM heatmap of `conv_layer`, time-averaged, upsampled to the input
/// size and max-normalised.
pub fn grad_cam(m: &Model3D, v: &VideoTensor, conv_layer: usize, class_idx: usize) -> Result<GradientMap> {
    let (slices, h, w) = cam_slices(m, v, conv_layer, class_idx)?;
    let n = slices.len() as f64;
    let mut cam = vec![0.0f64; h * w];
    for s in &slices {
        for (c, x) in cam.iter_mut().zip(s) {
            *c += x / n;
        }
    }
    Ok(cam_to_map(&cam, h, w, v, 0, conv_layer))
}

/// Per-frame Grad-CAM: input frame `t` takes the layer's temporal slice
/// `t · T_layer / T`.
pub fn grad_cam_frames(m: &Model3D, v: &VideoTensor, conv_layer: usize, class_idx: usize) -> Result<Vec<GradientMap>> {
    let (slices, h, w) = cam_slices(m, v, conv_layer, class_idx)?;
    let t = v.frames();
    Ok((0..t)
        .map(|f| cam_to_map(&slices[f * slices.len() / t], h, w, v, f, conv_layer))
        .collect())
}

/// Index of the last conv layer, the usual Grad-CAM site.
pub fn last_conv_layer(m: &Model3D) -> Option<usize> {
    m.layers().iter().rposition(|l| matches!(l, Layer::Conv3d(_)))
}

/// Half-pixel-centre bilinear resize of a single plane.
fn upsample_bilinear(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(oh * ow);
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for y in 0..oh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for x in 0..ow {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let p = |yy: usize, xx: usize| src[yy * w + xx];
            let top = p(y0, x0) * (1.0 - tx) + p(y0, x1) * tx;
            let bot = p(y1, x0) * (1.0 - tx) + p(y1, x1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.01,
            seed: 0,
            batch_size: 8,
            momentum: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean cross-entropy over the minibatches of each epoch.
    pub epoch_loss: Vec<f64>,
    /// Training-set accuracy after each epoch.
    pub epoch_accuracy: Vec<f64>,
}

/// Loss and parameter gradients of one clip.
fn clip_grads(m: &Model3D, clip: &LabeledClip) -> Result<(f64, ParamGrads, bool)> {
    let (logits, trace) = m.forward(&clip.video)?;
    let (loss, g) = softmax_cross_entropy(&logits, clip.label);
    let correct = predict_from_logits(&logits) == clip.label;
    Ok((loss, m.backward_params(&trace, &g)?, correct))
}

/// Minibatch SGD with momentum on softmax cross-entropy.
///
/// Per-clip gradients are computed in parallel and summed in batch order, so
/// the result depends only on the seed.
pub fn train(m: &mut Model3D, data: &[LabeledClip], cfg: &TrainConfig) -> Result<TrainLog> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if cfg.batch_size == 0 || !cfg.lr.is_finite() || cfg.lr <= 0.0 {
        return Err(Error::InvalidArgument("batch size and lr must be positive".into()));
    }
    for c in data {
        m.check_input(&c.video)?;
        check_class(m, c.label)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity: Vec<Option<(Vec<f64>, Vec<f64>)>> = m
        .layers
        .iter()
        .map(|l| l.params().map(|(w, b)| (vec![0.0; w.len()], vec![0.0; b.len()])))
        .collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainLog {
        epoch_loss: Vec::with_capacity(cfg.epochs),
        epoch_accuracy: Vec::with_capacity(cfg.epochs),
    };
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let model = &*m;
            let results = batch
                .par_iter()
                .map(|&i| clip_grads(model, &data[i]))
                .collect::<Result<Vec<_>>>()?;
            let mut iter = results.into_iter();
            let (l0, mut total, c0) = iter.next().unwrap();
            loss_sum += l0;
            correct += c0 as usize;
            for (l, g, c) in iter {
                loss_sum += l;
                correct += c as usize;
                total.add_assign(&g);
            }
            if !loss_sum.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss diverged in epoch {epoch}; lower the learning rate"
                )));
            }
            let scale = 1.0 / batch.len() as f64;
            for ((layer, vel), grad) in m.layers.iter_mut().zip(velocity.iter_mut()).zip(total.0) {
                if let (Some((w, b)), Some((vw, vb)), Some((gw, gb))) = (layer.params_mut(), vel.as_mut(), grad) {
                    for ((p, v), g) in w.iter_mut().chain(b.iter_mut()).zip(vw.iter_mut().chain(vb.iter_mut())).zip(gw.iter().chain(&gb)) {
                        *v = cfg.momentum * *v + g * scale;
                        *p -= cfg.lr * *v;
                    }
                }
            }
        }
        let mean = loss_sum / data.len() as f64;
        log::debug!("epoch {epoch}: loss {mean:.4} acc {:.3}", correct as f64 / data.len() as f64);
        log.epoch_loss.push(mean);
        log.epoch_accuracy.push(correct as f64 / data.len() as f64);
    }
    m.round_params_to_f32();
    Ok(log)
}

/// Fraction of clips classified correctly.
pub fn accuracy(m: &Model3D, data: &[LabeledClip]) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let hits = data
        .par_iter()
        .map(|c| m.predict(&c.video).map(|p| (p == c.label) as usize))
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_volume(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Volume {
        let n = shape.iter().product();
        Volume {
            shape,
            data: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    fn rand_conv(rng: &mut ChaCha8Rng, i: usize, o: usize, k: [usize; 3], s: [usize; 3], p: [usize; 3]) -> Conv3d {
        let mut c = Conv3d::zeros(i, o, k, s, p);
        c.weight.iter_mut().for_each(|w| *w = rng.gen_range(-0.5..0.5));
        c.bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.1..0.1));
        c
    }

    /// Direct definition of a 3D convolution, used to cross-check the strided
    /// loops.
    fn naive_conv(c: &Conv3d, x: &Volume) -> Volume {
        let os = c.out_shape(x.shape).unwrap();
        let mut out = Volume::zeros(os);
        for o in 0..os[0] {
            for t in 0..os[1] {
                for y in 0..os[2] {
                    for xx in 0..os[3] {
                        let mut acc = c.bias[o];
                        for i in 0..c.in_ch {
                            for dt in 0..c.kernel[0] {
                                for dy in 0..c.kernel[1] {
                                    for dx in 0..c.kernel[2] {
                                        let ti = (t * c.stride[0] + dt) as isize - c.padding[0] as isize;
                                        let yi = (y * c.stride[1] + dy) as isize - c.padding[1] as isize;
                                        let xi = (xx * c.stride[2] + dx) as isize - c.padding[2] as isize;
                                        if ti < 0 || yi < 0 || xi < 0 || ti >= x.shape[1] as isize || yi >= x.shape[2] as isize || xi >= x.shape[3] as isize {
                                            continue;
                                        }
                                        let widx = (((o * c.in_ch + i) * c.kernel[0] + dt) * c.kernel[1] + dy) * c.kernel[2] + dx;
                                        let j = ((i * x.shape[1] + ti as usize) * x.shape[2] + yi as usize) * x.shape[3] + xi as usize;
                                        acc += c.weight[widx] * x.data[j];
                                    }
                                }
                            }
                        }
                        out.data[((o * os[1] + t) * os[2] + y) * os[3] + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (k, s, p) in [
            ([3, 3, 3], [1, 1, 1], [1, 1, 1]),
            ([2, 3, 2], [2, 1, 2], [0, 1, 1]),
            ([1, 1, 1], [1, 2, 1], [0, 0, 0]),
        ] {
            let c = rand_conv(&mut rng, 2, 3, k, s, p);
            let x = rand_volume(&mut rng, [2, 4, 5, 6]);
            let a = c.forward(&x).unwrap();
            let b = naive_conv(&c, &x);
            assert_eq!(a.shape, b.shape);
            for (u, v) in a.data.iter().zip(&b.data) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    fn tiny_model(seed: u64) -> Model3D {
        let shape = VideoShape::new(4, 1, 8, 8);
        let mut m = Model3D::new(
            vec![
                Layer::Conv3d(Conv3d::zeros(1, 2, [3, 3, 3], [1, 1, 1], [1, 1, 1])),
                Layer::Relu,
                Layer::MaxPool3d(MaxPool3d { kernel: [2, 2, 2], stride: [2, 2, 2] }),
                Layer::Flatten,
                Layer::Linear(Linear::zeros(2 * 2 * 4 * 4, 3)),
            ],
            shape,
            3,
        )
        .unwrap();
        m.init_params(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 77);
        for l in m.layers_mut() {
            if let Some((w, _)) = l.params_mut() {
                w.iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
            }
        }
        m
    }

    fn rand_video(seed: u64, shape: VideoShape) -> VideoTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VideoTensor::new(shape, (0..shape.len()).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let mut m = tiny_model(0);
        for l in m.layers_mut() {
            if let Some((w, b)) = l.params_mut() {
                w.fill(0.0);
                b.fill(0.0);
            }
        }
        let (logits, trace) = m.forward(&rand_video(1, m.input_shape())).unwrap();
        assert_eq!(logits, vec![0.0; 3]);
        assert_eq!(trace.activations.len(), m.layers().len() + 1);
    }

    #[test]
    fn identity_convolution() {
        let mut c = Conv3d::zeros(1, 1, [1, 1, 1], [1, 1, 1], [0, 0, 0]);
        c.weight[0] = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_volume(&mut rng, [1, 3, 8, 8]);
        assert_eq!(Layer::Conv3d(c).forward(&x).unwrap(), x);
    }

    #[test]
    fn forward_is_deterministic_and_finite() {
        let m = tiny_model(9);
        let v = rand_video(2, m.input_shape());
        let a = m.logits(&v).unwrap();
        let b = m.logits(&v).unwrap();
        assert!(a.iter().all(|x| x.is_finite()));
        assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn forward_rejects_wrong_shape() {
        let m = tiny_model(0);
        let v = rand_video(0, VideoShape::new(5, 1, 8, 8));
        assert!(matches!(m.forward(&v), Err(Error::Shape(_))));
    }

    #[test]
    fn model_validation() {
        let shape = VideoShape::new(4, 1, 8, 8);
        // final layer not linear
        assert!(Model3D::new(vec![Layer::Flatten], shape, 3).is_err());
        // wrong linear width
        assert!(Model3D::new(vec![Layer::Flatten, Layer::Linear(Linear::zeros(10, 3))], shape, 3).is_err());
        // classes mismatch
        assert!(Model3D::new(vec![Layer::Flatten, Layer::Linear(Linear::zeros(256, 2))], shape, 3).is_err());
    }

    #[test]
    fn stale_trace_is_rejected() {
        let m = tiny_model(0);
        let other = Model3D::micro_c3d(VideoShape::new(8, 1, 32, 32), 4, 0).unwrap();
        let (_, trace) = other.forward(&rand_video(0, other.input_shape())).unwrap();
        assert!(m.backward_input(&trace, &[1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn zero_output_grad_gives_zero_input_grad() {
        let m = tiny_model(4);
        let (_, trace) = m.forward(&rand_video(4, m.input_shape())).unwrap();
        let g = m.backward_input(&trace, &[0.0; 3]).unwrap();
        assert!(g.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn guided_support_within_standard_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_volume(&mut rng, [2, 3, 4, 4]);
        let g = rand_volume(&mut rng, [2, 3, 4, 4]);
        let std = Layer::Relu.backward(&x, &g, ReluMode::Standard);
        let gd = Layer::Relu.backward(&x, &g, ReluMode::Guided);
        for i in 0..x.len() {
            if gd.data[i] != 0.0 {
                assert!(x.data[i] > 0.0 && g.data[i] > 0.0);
                assert_eq!(std.data[i], gd.data[i]);
            }
        }
    }

    #[test]
    fn softmax_ce_gradient_is_softmax_minus_onehot() {
        let logits = [0.3, -1.2, 2.0, 0.0];
        let (loss, g) = softmax_cross_entropy(&logits, 2);
        let p = softmax(&logits);
        assert!((loss + p[2].ln()).abs() < 1e-12);
        for (i, gi) in g.iter().enumerate() {
            let expected = p[i] - if i == 2 { 1.0 } else { 0.0 };
            assert!((gi - expected).abs() < 1e-15);
        }
        // finite-difference check of the analytic gradient
        for i in 0..4 {
            let mut a = logits;
            let mut b = logits;
            a[i] += 1e-6;
            b[i] -= 1e-6;
            let fd = (softmax_cross_entropy(&a, 2).0 - softmax_cross_entropy(&b, 2).0) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn predict_tie_break_and_shift_invariance() {
        assert_eq!(predict_from_logits(&[0.1, 2.0, -1.0]), 1);
        assert_eq!(predict_from_logits(&[1.0, 1.0]), 0);
        let l = [0.4, -0.3, 0.9, 0.2];
        let shifted: Vec<f64> = l.iter().map(|v| v + 17.5).collect();
        assert_eq!(predict_from_logits(&l), predict_from_logits(&shifted));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = Model3D::micro_c3d(VideoShape::new(8, 1, 32, 32), 4, 3).unwrap();
        m.round_params_to_f32();
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"M3DC");
        let back = Model3D::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert!(Model3D::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Model3D::from_bytes(&bad).is_err());
    }

    #[test]
    fn guided_backprop_validates_indices_and_stays_standard() {
        let m = tiny_model(2);
        let v = rand_video(3, m.input_shape());
        assert!(guided_backprop(&m, &v, 4, 4, 0).is_err());
        assert!(guided_backprop(&m, &v, 0, 9, 0).is_err());
        assert!(guided_backprop(&m, &v, 0, 4, 3).is_err());
        assert_eq!(m.relu_mode(), ReluMode::Standard);
        let g = guided_backprop(&m, &v, 1, 4, 1).unwrap();
        assert_eq!(m.relu_mode(), ReluMode::Standard);
        assert!(g.data.iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert_eq!((g.channels, g.height, g.width), (1, 8, 8));
    }

    #[test]
    fn guided_backprop_of_zero_video_is_zero_for_bias_free_model() {
        let m = Model3D::micro_c3d(VideoShape::new(8, 1, 32, 32), 4, 11).unwrap();
        let v = VideoTensor::zeros(m.input_shape()).unwrap();
        let g = guided_backprop(&m, &v, 3, m.layers().len() - 1, 0).unwrap();
        assert!(g.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn guided_backprop_from_inner_layer() {
        let m = tiny_model(5);
        let v = rand_video(6, m.input_shape());
        let g = guided_backprop(&m, &v, 2, 1, 0).unwrap();
        assert_eq!(g.source_layer, 1);
        assert!(g.max() <= 1.0);
    }

    #[test]
    fn rectify_normalize_range() {
        let out = rectify_normalize(&[-4.0, 2.0, 0.0, 1.0]);
        assert_eq!(out, vec![0.0, 0.5, 0.0, 0.25]);
        assert_eq!(rectify_normalize(&[0.0, 0.0]), vec![0.0, 0.0]);
    }

    fn quadrant_model() -> (Model3D, VideoTensor) {
        let shape = VideoShape::new(2, 1, 8, 8);
        let mut conv = Conv3d::zeros(1, 1, [1, 1, 1], [1, 1, 1], [0, 0, 0]);
        conv.weight[0] = 1.0;
        let mut lin = Linear::zeros(2 * 8 * 8, 2);
        lin.weight[..128].fill(1.0);
        let m = Model3D::new(
            vec![Layer::Conv3d(conv), Layer::Relu, Layer::Flatten, Layer::Linear(lin)],
            shape,
            2,
        )
        .unwrap();
        let mut data = vec![0.0f32; shape.len()];
        for t in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    data[t * 64 + y * 8 + x] = 0.8;
                }
            }
        }
        (m, VideoTensor::new(shape, data).unwrap())
    }

    #[test]
    fn grad_cam_concentrates_on_responsive_quadrant() {
        let (m, v) = quadrant_model();
        let cam = grad_cam(&m, &v, 0, 0).unwrap();
        assert!(cam.data.iter().all(|&x| (0.0..=1.0).contains(&x)));
        let total: f32 = cam.data.iter().sum();
        let tl: f32 = (0..4).flat_map(|y| (0..4).map(move |x| (x, y))).map(|(x, y)| cam.data[y * 8 + x]).sum();
        assert!(tl / total > 0.5, "top-left share {}", tl / total);

        let zero = VideoTensor::zeros(v.shape()).unwrap();
        assert!(grad_cam(&m, &zero, 0, 0).unwrap().data.iter().all(|&x| x == 0.0));
        assert!(grad_cam(&m, &v, 1, 0).is_err());
    }

    #[test]
    fn counted_model_counts() {
        let m = tiny_model(0);
        let c = CountedModel::new(&m);
        let v = rand_video(0, m.input_shape());
        c.predict(&v).unwrap();
        c.logits(&v).unwrap();
        assert_eq!(c.calls(), 2);
    }

    fn toy_clips(n: usize, seed: u64) -> Vec<LabeledClip> {
        // class 0: bright first half of frames; class 1: bright second half
        let shape = VideoShape::new(4, 1, 8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = i % 2;
                let data = (0..shape.len())
                    .map(|j| {
                        let t = j / 64;
                        let on = (t < 2) == (label == 0);
                        let base = if on { 0.7 } else { 0.2 };
                        (base + rng.gen_range(-0.1..0.1f32)).clamp(0.0, 1.0)
                    })
                    .collect();
                LabeledClip { video: VideoTensor::new(shape, data).unwrap(), label }
            })
            .collect()
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let data = toy_clips(16, 1);
        let make = || {
            let shape = VideoShape::new(4, 1, 8, 8);
            let mut m = Model3D::new(
                vec![
                    Layer::Conv3d(Conv3d::zeros(1, 2, [3, 3, 3], [1, 1, 1], [1, 1, 1])),
                    Layer::Relu,
                    Layer::MaxPool3d(MaxPool3d { kernel: [2, 2, 2], stride: [2, 2, 2] }),
                    Layer::Flatten,
                    Layer::Linear(Linear::zeros(2 * 2 * 4 * 4, 2)),
                ],
                shape,
                2,
            )
            .unwrap();
            m.init_params(3);
            m
        };
        let cfg = TrainConfig { epochs: 15, lr: 0.05, seed: 4, batch_size: 4, momentum: 0.9 };
        let mut a = make();
        let mut b = make();
        let la = train(&mut a, &data, &cfg).unwrap();
        let lb = train(&mut b, &data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert!((la.epoch_loss[0] - 2f64.ln()).abs() < 0.2 * 2f64.ln());
        assert!(la.epoch_loss.last().unwrap() < &la.epoch_loss[0]);
        assert!(accuracy(&a, &data).unwrap() >= 0.9);
    }

    #[test]
    fn training_rejects_bad_input() {
        let mut m = tiny_model(0);
        assert!(train(&mut m, &[], &TrainConfig::default()).is_err());
        // a linear model with an absurd step overflows its logits
        let shape = VideoShape::new(4, 1, 8, 8);
        let mut lin = Model3D::new(vec![Layer::Flatten, Layer::Linear(Linear::zeros(256, 2))], shape, 2).unwrap();
        let cfg = TrainConfig { epochs: 3, lr: f64::MAX, ..TrainConfig::default() };
        let r = train(&mut lin, &toy_clips(8, 0), &cfg);
        assert!(matches!(r, Err(Error::NonFinite(_))), "{r:?}");
    }
}
