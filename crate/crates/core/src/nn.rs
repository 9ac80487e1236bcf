//! Minimal differentiable building blocks: dense (1x1) and 3x3 convolutional
//! layers, pointwise activations, nearest-neighbor upsampling, reverse-mode
//! gradients over a recorded tape, Adam, and bit-exact checkpoints.
//!
//! A stack maps a channel-major tensor (c, h, w) to another; dense layers act
//! per spatial position, which is exactly the pixel-wise contract the spectral
//! autoencoder needs. All math is in the scalar type `S`; training runs in
//! f64 so finite-difference validation is meaningful.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result, Scalar};

/// Channel-major tensor: element (ch, y, x) lives at ch*h*w + y*w + x.
/// Matches the cube layout in `hsio` with h = ny, w = nx.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(c: usize, h: usize, w: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != c * h * w {
            return Err(Error::Shape(format!(
                "tensor data length {} != {c}x{h}x{w}",
                data.len()
            )));
        }
        Ok(Tensor { c, h, w, data })
    }

    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor { c, h, w, data: vec![S::zero(); c * h * w] }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn at(&self, ch: usize, y: usize, x: usize) -> S {
        self.data[ch * self.h * self.w + y * self.w + x]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// One layer of a stack. Convolutions are 3x3 with zero padding 1; stride 2
/// halves even spatial dims and rejects odd ones (no implicit padding).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { inp: usize, out: usize },
    Conv { c_in: usize, c_out: usize, stride: usize },
    Relu,
    Tanh,
    /// (tanh(x) + 1)/2: smooth squash onto (0, 1).
    UnitTanh,
    Upsample2x,
}

impl LayerSpec {
    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Dense { inp, out } => out * inp + out,
            LayerSpec::Conv { c_in, c_out, .. } => c_out * c_in * 9 + c_out,
            _ => 0,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Dense { inp, out } => {
                if inp == 0 || out == 0 {
                    return Err(Error::Shape("dense layer with zero width".into()));
                }
            }
            LayerSpec::Conv { c_in, c_out, stride } => {
                if c_in == 0 || c_out == 0 {
                    return Err(Error::Shape("conv layer with zero channels".into()));
                }
                if stride != 1 && stride != 2 {
                    return Err(Error::Shape(format!("conv stride must be 1 or 2, got {stride}")));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Channels consumed/produced, `None` for channel-agnostic layers.
    fn channel_map(&self) -> Option<(usize, usize)> {
        match *self {
            LayerSpec::Dense { inp, out } => Some((inp, out)),
            LayerSpec::Conv { c_in, c_out, .. } => Some((c_in, c_out)),
            _ => None,
        }
    }
}

/// Ordered layers with one flat parameter vector. `version` ticks on every
/// parameter mutation so stale tapes are detectable.
#[derive(Debug, Clone)]
pub struct LayerStack<S> {
    layers: Vec<LayerSpec>,
    offsets: Vec<usize>,
    params: Vec<S>,
    seed: u64,
    version: u64,
    frozen: bool,
}

/// Activation record from one forward pass: the input seen by each layer.
#[derive(Debug, Clone)]
pub struct Tape<S> {
    version: u64,
    inputs: Vec<Tensor<S>>,
}

impl<S: Scalar> LayerStack<S> {
    /// Build and Xavier-initialize: weights uniform in +-sqrt(6/(fan_in +
    /// fan_out)) from a ChaCha stream seeded by `seed`, biases zero.
    pub fn new(layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        use rand::{Rng, SeedableRng};
        let mut stack = LayerStack::with_params_impl(layers, seed, Vec::new(), false, true)?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for (i, layer) in stack.layers.iter().enumerate() {
            let off = stack.offsets[i];
            match *layer {
                LayerSpec::Dense { inp, out } => {
                    let a = (6.0 / (inp + out) as f64).sqrt();
                    for k in 0..out * inp {
                        stack.params[off + k] = S::cst(rng.gen_range(-a..a));
                    }
                }
                LayerSpec::Conv { c_in, c_out, .. } => {
                    let a = (6.0 / ((c_in + c_out) * 9) as f64).sqrt();
                    for k in 0..c_out * c_in * 9 {
                        stack.params[off + k] = S::cst(rng.gen_range(-a..a));
                    }
                }
                _ => {}
            }
        }
        Ok(stack)
    }

    /// Rebuild from explicit parameters (checkpoint load path).
    pub fn from_parts(
        layers: Vec<LayerSpec>,
        seed: u64,
        params: Vec<S>,
        frozen: bool,
    ) -> Result<Self> {
        LayerStack::with_params_impl(layers, seed, params, frozen, false)
    }

    fn with_params_impl(
        layers: Vec<LayerSpec>,
        seed: u64,
        params: Vec<S>,
        frozen: bool,
        fresh: bool,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("a stack needs at least one layer".into()));
        }
        let mut chan: Option<usize> = None;
        for layer in &layers {
            layer.validate()?;
            if let Some((cin, cout)) = layer.channel_map() {
                if let Some(c) = chan {
                    if c != cin {
                        return Err(Error::Shape(format!(
                            "layer expects {cin} channels but receives {c}"
                        )));
                    }
                }
                chan = Some(cout);
            }
        }
        let mut offsets = Vec::with_capacity(layers.len());
        let mut total = 0;
        for layer in &layers {
            offsets.push(total);
            total += layer.param_count();
        }
        let params = if fresh {
            vec![S::zero(); total]
        } else {
            if params.len() != total {
                return Err(Error::Shape(format!(
                    "parameter vector has {} entries, layers declare {total}",
                    params.len()
                )));
            }
            params
        };
        Ok(LayerStack { layers, offsets, params, seed, version: 0, frozen })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[S] {
        &self.params
    }

    pub fn layer_params(&self, i: usize) -> &[S] {
        let off = self.offsets[i];
        &self.params[off..off + self.layers[i].param_count()]
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn set_params(&mut self, params: &[S]) -> Result<()> {
        if self.frozen {
            return Err(Error::Contract("attempt to mutate a frozen stack".into()));
        }
        if params.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "parameter vector has {} entries, stack holds {}",
                params.len(),
                self.params.len()
            )));
        }
        self.params.copy_from_slice(params);
        self.version += 1;
        Ok(())
    }

    /// Mutable parameter access for an optimizer step; bumps the version.
    pub fn params_for_update(&mut self) -> Result<&mut [S]> {
        if self.frozen {
            return Err(Error::Contract("attempt to mutate a frozen stack".into()));
        }
        self.version += 1;
        Ok(&mut self.params)
    }

    /// Output shape for a given input shape, without running anything.
    pub fn output_shape(&self, mut shape: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        for layer in &self.layers {
            shape = layer_output_shape(layer, shape)?;
        }
        Ok(shape)
    }

    pub fn forward(&self, input: &Tensor<S>) -> Result<(Tensor<S>, Tape<S>)> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut cur = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            layer_output_shape(layer, cur.shape())?;
            let next = layer_forward(layer, self.layer_params(i), &cur);
            inputs.push(cur);
            cur = next;
        }
        Ok((cur, Tape { version: self.version, inputs }))
    }

    /// Reverse accumulation: gradient of a scalar loss w.r.t. parameters and
    /// the stack input, given the loss gradient at the output.
    pub fn backward(&self, tape: &Tape<S>, grad_out: &Tensor<S>) -> Result<(Vec<S>, Tensor<S>)> {
        if tape.version != self.version {
            return Err(Error::Contract(
                "stale tape: parameters changed since the forward pass".into(),
            ));
        }
        if tape.inputs.len() != self.layers.len() {
            return Err(Error::Contract("tape does not match this stack".into()));
        }
        let expect = self.output_shape(tape.inputs[0].shape())?;
        if grad_out.shape() != expect {
            return Err(Error::Shape(format!(
                "output gradient shape {:?} != stack output {:?}",
                grad_out.shape(),
                expect
            )));
        }
        let mut grads = vec![S::zero(); self.params.len()];
        let mut g = grad_out.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let off = self.offsets[i];
            let pc = layer.param_count();
            g = layer_backward(
                layer,
                self.layer_params(i),
                &tape.inputs[i],
                &g,
                &mut grads[off..off + pc],
            );
        }
        Ok((grads, g))
    }
}

fn layer_output_shape(
    layer: &LayerSpec,
    (c, h, w): (usize, usize, usize),
) -> Result<(usize, usize, usize)> {
    match *layer {
        LayerSpec::Dense { inp, out } => {
            if c != inp {
                return Err(Error::Shape(format!("dense expects {inp} channels, got {c}")));
            }
            Ok((out, h, w))
        }
        LayerSpec::Conv { c_in, c_out, stride } => {
            if c != c_in {
                return Err(Error::Shape(format!("conv expects {c_in} channels, got {c}")));
            }
            if stride == 2 && (h % 2 != 0 || w % 2 != 0) {
                return Err(Error::Shape(format!(
                    "stride-2 conv needs even spatial dims, got {h}x{w}"
                )));
            }
            Ok((c_out, h / stride, w / stride))
        }
        LayerSpec::Upsample2x => Ok((c, 2 * h, 2 * w)),
        _ => Ok((c, h, w)),
    }
}

fn layer_forward<S: Scalar>(layer: &LayerSpec, p: &[S], x: &Tensor<S>) -> Tensor<S> {
    let (c, h, w) = x.shape();
    match *layer {
        LayerSpec::Dense { inp, out } => {
            let n = h * w;
            let mut y = Tensor::zeros(out, h, w);
            let (wts, bias) = p.split_at(out * inp);
            for o in 0..out {
                let yo = &mut y.data[o * n..(o + 1) * n];
                yo.iter_mut().for_each(|v| *v = bias[o]);
                for i in 0..inp {
                    let wv = wts[o * inp + i];
                    if wv == S::zero() {
                        continue;
                    }
                    let xi = &x.data[i * n..(i + 1) * n];
                    for (yv, &xv) in yo.iter_mut().zip(xi) {
                        *yv += wv * xv;
                    }
                }
            }
            y
        }
        LayerSpec::Conv { c_in, c_out, stride } => {
            let (oh, ow) = (h / stride, w / stride);
            let mut y = Tensor::zeros(c_out, oh, ow);
            let (wts, bias) = p.split_at(c_out * c_in * 9);
            for o in 0..c_out {
                for yo in 0..oh {
                    for xo in 0..ow {
                        let mut acc = bias[o];
                        for i in 0..c_in {
                            for dy in 0..3usize {
                                let yi = (yo * stride + dy).wrapping_sub(1);
                                if yi >= h {
                                    continue;
                                }
                                for dx in 0..3usize {
                                    let xi = (xo * stride + dx).wrapping_sub(1);
                                    if xi >= w {
                                        continue;
                                    }
                                    acc += wts[((o * c_in + i) * 3 + dy) * 3 + dx]
                                        * x.data[i * h * w + yi * w + xi];
                                }
                            }
                        }
                        y.data[o * oh * ow + yo * ow + xo] = acc;
                    }
                }
            }
            y
        }
        LayerSpec::Relu => {
            let mut y = x.clone();
            for v in &mut y.data {
                if *v < S::zero() {
                    *v = S::zero();
                }
            }
            y
        }
        LayerSpec::Tanh => {
            let mut y = x.clone();
            for v in &mut y.data {
                *v = v.tanh();
            }
            y
        }
        LayerSpec::UnitTanh => {
            let mut y = x.clone();
            let half = S::cst(0.5);
            for v in &mut y.data {
                *v = (v.tanh() + S::one()) * half;
            }
            y
        }
        LayerSpec::Upsample2x => {
            let mut y = Tensor::zeros(c, 2 * h, 2 * w);
            for ch in 0..c {
                for yy in 0..2 * h {
                    for xx in 0..2 * w {
                        y.data[ch * 4 * h * w + yy * 2 * w + xx] =
                            x.data[ch * h * w + (yy / 2) * w + xx / 2];
                    }
                }
            }
            y
        }
    }
}

fn layer_backward<S: Scalar>(
    layer: &LayerSpec,
    p: &[S],
    x: &Tensor<S>,
    g: &Tensor<S>,
    pg: &mut [S],
) -> Tensor<S> {
    let (c, h, w) = x.shape();
    match *layer {
        LayerSpec::Dense { inp, out } => {
            let n = h * w;
            let (wts, _) = p.split_at(out * inp);
            let (wg, bg) = pg.split_at_mut(out * inp);
            let mut gx = Tensor::zeros(inp, h, w);
            for o in 0..out {
                let go = &g.data[o * n..(o + 1) * n];
                let mut bsum = S::zero();
                for &gv in go {
                    bsum += gv;
                }
                bg[o] = bsum;
                for i in 0..inp {
                    let xi = &x.data[i * n..(i + 1) * n];
                    let mut acc = S::zero();
                    for (&gv, &xv) in go.iter().zip(xi) {
                        acc += gv * xv;
                    }
                    wg[o * inp + i] = acc;
                    let wv = wts[o * inp + i];
                    let gi = &mut gx.data[i * n..(i + 1) * n];
                    for (gxv, &gv) in gi.iter_mut().zip(go) {
                        *gxv += wv * gv;
                    }
                }
            }
            gx
        }
        LayerSpec::Conv { c_in, c_out, stride } => {
            let (oh, ow) = (h / stride, w / stride);
            let (wts, _) = p.split_at(c_out * c_in * 9);
            let (wg, bg) = pg.split_at_mut(c_out * c_in * 9);
            let mut gx = Tensor::zeros(c_in, h, w);
            for o in 0..c_out {
                for yo in 0..oh {
                    for xo in 0..ow {
                        let gv = g.data[o * oh * ow + yo * ow + xo];
                        if gv == S::zero() {
                            continue;
                        }
                        bg[o] += gv;
                        for i in 0..c_in {
                            for dy in 0..3usize {
                                let yi = (yo * stride + dy).wrapping_sub(1);
                                if yi >= h {
                                    continue;
                                }
                                for dx in 0..3usize {
                                    let xi = (xo * stride + dx).wrapping_sub(1);
                                    if xi >= w {
                                        continue;
                                    }
                                    let widx = ((o * c_in + i) * 3 + dy) * 3 + dx;
                                    let xidx = i * h * w + yi * w + xi;
                                    wg[widx] += gv * x.data[xidx];
                                    gx.data[xidx] += gv * wts[widx];
                                }
                            }
                        }
                    }
                }
            }
            gx
        }
        LayerSpec::Relu => {
            let mut gx = g.clone();
            for (gv, &xv) in gx.data.iter_mut().zip(&x.data) {
                if xv <= S::zero() {
                    *gv = S::zero();
                }
            }
            gx
        }
        LayerSpec::Tanh => {
            let mut gx = g.clone();
            for (gv, &xv) in gx.data.iter_mut().zip(&x.data) {
                let t = xv.tanh();
                *gv = *gv * (S::one() - t * t);
            }
            gx
        }
        LayerSpec::UnitTanh => {
            let mut gx = g.clone();
            let half = S::cst(0.5);
            for (gv, &xv) in gx.data.iter_mut().zip(&x.data) {
                let t = xv.tanh();
                *gv = *gv * (S::one() - t * t) * half;
            }
            gx
        }
        LayerSpec::Upsample2x => {
            let mut gx = Tensor::zeros(c, h, w);
            for ch in 0..c {
                for yy in 0..2 * h {
                    for xx in 0..2 * w {
                        gx.data[ch * h * w + (yy / 2) * w + xx / 2] +=
                            g.data[ch * 4 * h * w + yy * 2 * w + xx];
                    }
                }
            }
            gx
        }
    }
}

/// Bias-corrected Adam over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam<S> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    t: u64,
    m: Vec<S>,
    v: Vec<S>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: S, n: usize) -> Self {
        Adam {
            lr,
            beta1: S::cst(0.9),
            beta2: S::cst(0.999),
            eps: S::cst(1e-8),
            t: 0,
            m: vec![S::zero(); n],
            v: vec![S::zero(); n],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [S], grads: &[S]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape("optimizer state and gradient lengths differ".into()));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence("non-finite gradient reached the optimizer".into()));
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = S::one() - self.beta1.powi(t);
        let bc2 = S::one() - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (S::one() - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (S::one() - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }

    /// One update over parameters that live in separate stacks but are
    /// optimized as one flat vector, in slice order.
    pub fn step_multi(&mut self, params: &mut [&mut [S]], grads: &[&[S]]) -> Result<()> {
        let total: usize = params.iter().map(|p| p.len()).sum();
        let mut flat_p: Vec<S> = Vec::with_capacity(total);
        for p in params.iter() {
            flat_p.extend_from_slice(p);
        }
        let mut flat_g: Vec<S> = Vec::with_capacity(total);
        for g in grads {
            flat_g.extend_from_slice(g);
        }
        self.step(&mut flat_p, &flat_g)?;
        let mut off = 0;
        for p in params.iter_mut() {
            p.copy_from_slice(&flat_p[off..off + p.len()]);
            off += p.len();
        }
        Ok(())
    }
}

/// Mean loss and mean gradient over a batch, evaluated in parallel but
/// reduced strictly in sample order, so the result is independent of the
/// thread count. The loss slot may be any averaging aggregate (for example a
/// struct of several loss components), not just a scalar.
pub fn batch_mean_loss_and_grad<S, T, L, F>(samples: &[T], f: F) -> (L, Vec<S>)
where
    S: Scalar,
    T: Sync,
    L: std::ops::AddAssign + std::ops::DivAssign<S> + Copy + Send,
    F: Fn(&T) -> (L, Vec<S>) + Sync + Send,
{
    use rayon::prelude::*;
    let mut per: Vec<(L, Vec<S>)> = samples.par_iter().map(&f).collect();
    let n = S::cst(samples.len() as f64);
    let mut it = per.drain(..);
    let (mut loss, mut grad) = it.next().expect("batch must be non-empty");
    for (l, g) in it {
        loss += l;
        for (acc, gv) in grad.iter_mut().zip(g) {
            *acc += gv;
        }
    }
    loss /= n;
    for g in &mut grad {
        *g /= n;
    }
    (loss, grad)
}

/// Central finite differences of a scalar function of the parameters.
pub fn finite_difference_gradient<S, F>(mut f: F, params: &[S], h: S) -> Vec<S>
where
    S: Scalar,
    F: FnMut(&[S]) -> S,
{
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    let two_h = S::cst(2.0) * h;
    for i in 0..params.len() {
        let orig = work[i];
        work[i] = orig + h;
        let fp = f(&work);
        work[i] = orig - h;
        let fm = f(&work);
        work[i] = orig;
        out.push((fp - fm) / two_h);
    }
    out
}

/// Worst relative disagreement between two gradient vectors, with a floor so
/// that agreeing near-zero entries do not register.
pub fn max_relative_error<S: Scalar>(analytic: &[S], numeric: &[S]) -> S {
    assert_eq!(analytic.len(), numeric.len());
    let floor = S::cst(1e-6);
    let mut worst = S::zero();
    for (&a, &n) in analytic.iter().zip(numeric) {
        let denom = (a.abs() + n.abs()).max(floor);
        worst = worst.max((a - n).abs() / denom);
    }
    worst
}

const NNW_MAGIC: &[u8; 4] = b"NNW1";

#[derive(Serialize, Deserialize)]
struct StackManifest {
    name: String,
    seed: u64,
    frozen: bool,
    layers: Vec<LayerSpec>,
    param_count: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    stacks: Vec<StackManifest>,
    extra: serde_json::Value,
}

/// Write named stacks plus arbitrary sidecar JSON. Layout: magic, u32 LE
/// manifest length, manifest JSON, then each stack's parameters as f64 LE in
/// manifest order. Round-trips bit-exactly for f64 stacks.
pub fn save_checkpoint<S: Scalar, P: AsRef<Path>>(
    path: P,
    stacks: &[(&str, &LayerStack<S>)],
    extra: &serde_json::Value,
) -> Result<()> {
    let manifest = CheckpointManifest {
        stacks: stacks
            .iter()
            .map(|(name, s)| StackManifest {
                name: (*name).to_string(),
                seed: s.seed,
                frozen: s.frozen,
                layers: s.layers.clone(),
                param_count: s.param_count(),
            })
            .collect(),
        extra: extra.clone(),
    };
    let mjson = serde_json::to_vec(&manifest)
        .map_err(|e| Error::Data(format!("manifest serialization failed: {e}")))?;
    let mut bytes = Vec::with_capacity(8 + mjson.len());
    bytes.extend_from_slice(NNW_MAGIC);
    bytes.extend_from_slice(&(mjson.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&mjson);
    for (_, s) in stacks {
        for p in s.params() {
            bytes.extend_from_slice(&p.f64().to_le_bytes());
        }
    }
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Load every stack in a checkpoint plus its sidecar JSON.
pub fn load_checkpoint<S: Scalar, P: AsRef<Path>>(
    path: P,
) -> Result<(Vec<(String, LayerStack<S>)>, serde_json::Value)> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let fail = |reason: &str| Error::file_format(path, reason);
    if bytes.len() < 8 || &bytes[0..4] != NNW_MAGIC {
        return Err(fail("missing NNW1 magic"));
    }
    let mlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + mlen {
        return Err(fail("truncated manifest"));
    }
    let manifest: CheckpointManifest =
        serde_json::from_slice(&bytes[8..8 + mlen]).map_err(|e| {
            Error::file_format(path, format!("manifest parse error: {e}"))
        })?;
    let mut off = 8 + mlen;
    let mut out = Vec::with_capacity(manifest.stacks.len());
    for sm in manifest.stacks {
        let nbytes = sm.param_count * 8;
        if bytes.len() < off + nbytes {
            return Err(fail("truncated parameter payload"));
        }
        let mut params = Vec::with_capacity(sm.param_count);
        for k in 0..sm.param_count {
            let raw: [u8; 8] = bytes[off + 8 * k..off + 8 * k + 8].try_into().unwrap();
            params.push(S::cst(f64::from_le_bytes(raw)));
        }
        off += nbytes;
        let stack = LayerStack::from_parts(sm.layers, sm.seed, params, sm.frozen)
            .map_err(|e| Error::file_format(path, format!("inconsistent manifest: {e}")))?;
        out.push((sm.name, stack));
    }
    if off != bytes.len() {
        return Err(fail("trailing bytes after parameter payload"));
    }
    Ok((out, manifest.extra))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(c, h, w, data).unwrap()
    }

    /// Scalar loss used by the gradient checks: fixed random weighting of the
    /// output, so the loss exercises every output element.
    fn weighted_loss(stack: &LayerStack<f64>, input: &Tensor<f64>, wseed: u64) -> f64 {
        let (out, _) = stack.forward(input).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(wseed);
        out.data().iter().map(|v| v * rng.gen_range(-1.0..1.0)).sum()
    }

    fn loss_grad(stack: &LayerStack<f64>, input: &Tensor<f64>, wseed: u64) -> (Vec<f64>, Tensor<f64>) {
        let (out, tape) = stack.forward(input).unwrap();
        let (c, h, w) = out.shape();
        let mut rng = ChaCha8Rng::seed_from_u64(wseed);
        let gdata = (0..out.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g = Tensor::new(c, h, w, gdata).unwrap();
        stack.backward(&tape, &g).unwrap()
    }

    #[test]
    fn identity_dense_layer_passes_input_through() {
        let mut stack =
            LayerStack::new(vec![LayerSpec::Dense { inp: 4, out: 4 }], 0).unwrap();
        let mut p = vec![0.0; stack.param_count()];
        for i in 0..4 {
            p[i * 4 + i] = 1.0;
        }
        stack.set_params(&p).unwrap();
        let x = random_tensor(4, 3, 2, 1);
        let (y, _) = stack.forward(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn relu_zeroes_negative_input() {
        let stack = LayerStack::new(vec![LayerSpec::Relu], 0).unwrap();
        let x = Tensor::new(1, 1, 3, vec![-1.0, -0.5, -7.0]).unwrap();
        let (y, _) = stack.forward(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_layer_mlp_matches_hand_rolled_products() {
        let stack = LayerStack::new(
            vec![
                LayerSpec::Dense { inp: 3, out: 4 },
                LayerSpec::Relu,
                LayerSpec::Dense { inp: 4, out: 2 },
            ],
            0,
        )
        .unwrap();
        let x = random_tensor(3, 1, 1, 42);
        let (y, _) = stack.forward(&x).unwrap();
        // Straight-line recomputation from the raw parameter slices.
        let p1 = stack.layer_params(0);
        let p2 = stack.layer_params(2);
        let mut hidden = [0.0; 4];
        for o in 0..4 {
            let mut acc = p1[12 + o];
            for i in 0..3 {
                acc += p1[o * 3 + i] * x.data()[i];
            }
            hidden[o] = acc.max(0.0);
        }
        for o in 0..2 {
            let mut acc = p2[8 + o];
            for i in 0..4 {
                acc += p2[o * 4 + i] * hidden[i];
            }
            assert!((y.data()[o] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_acts_per_position() {
        // Running the stack on a 2x2 tensor must equal running it pixel by
        // pixel; this is the pixel-wise purity the spectral encoder relies on.
        let stack = LayerStack::new(
            vec![LayerSpec::Dense { inp: 3, out: 5 }, LayerSpec::Tanh],
            3,
        )
        .unwrap();
        let x = random_tensor(3, 2, 2, 4);
        let (y, _) = stack.forward(&x).unwrap();
        for pos in 0..4 {
            let px = Tensor::new(3, 1, 1, (0..3).map(|c| x.data()[c * 4 + pos]).collect()).unwrap();
            let (py, _) = stack.forward(&px).unwrap();
            for c in 0..5 {
                assert!((y.data()[c * 4 + pos] - py.data()[c]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn identity_stack_quadratic_loss_gradient_is_closed_form() {
        // loss = sum_o g_o * y_o with y = W x + b. dW[o][i] = g_o x_i exactly.
        let stack = LayerStack::new(vec![LayerSpec::Dense { inp: 3, out: 3 }], 7).unwrap();
        let x = random_tensor(3, 1, 1, 5);
        let (_, tape) = stack.forward(&x).unwrap();
        let g = Tensor::new(3, 1, 1, vec![1.0, -2.0, 0.5]).unwrap();
        let (pg, gx) = stack.backward(&tape, &g).unwrap();
        for o in 0..3 {
            for i in 0..3 {
                assert!((pg[o * 3 + i] - g.data()[o] * x.data()[i]).abs() < 1e-14);
            }
            assert!((pg[9 + o] - g.data()[o]).abs() < 1e-14);
        }
        // Input gradient: W^T g.
        let w = stack.layer_params(0);
        for i in 0..3 {
            let want: f64 = (0..3).map(|o| w[o * 3 + i] * g.data()[o]).sum();
            assert!((gx.data()[i] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_output_gradient_gives_zero_parameter_gradient() {
        let stack = LayerStack::new(
            vec![LayerSpec::Conv { c_in: 2, c_out: 3, stride: 1 }, LayerSpec::Relu],
            11,
        )
        .unwrap();
        let x = random_tensor(2, 4, 4, 6);
        let (out, tape) = stack.forward(&x).unwrap();
        let (c, h, w) = out.shape();
        let (pg, gx) = stack.backward(&tape, &Tensor::zeros(c, h, w)).unwrap();
        assert!(pg.iter().all(|&v| v == 0.0));
        assert!(gx.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn every_layer_type_passes_finite_difference_check() {
        // One stack exercising dense, conv (both strides), all activations
        // and the upsampler, checked against central differences.
        let layers = vec![
            LayerSpec::Conv { c_in: 2, c_out: 3, stride: 1 },
            LayerSpec::Relu,
            LayerSpec::Conv { c_in: 3, c_out: 4, stride: 2 },
            LayerSpec::Tanh,
            LayerSpec::Upsample2x,
            LayerSpec::Dense { inp: 4, out: 3 },
            LayerSpec::UnitTanh,
            LayerSpec::Dense { inp: 3, out: 2 },
        ];
        let mut stack = LayerStack::new(layers, 13).unwrap();
        let x = random_tensor(2, 4, 4, 14);
        let (analytic, _) = loss_grad(&stack, &x, 99);
        let params = stack.params().to_vec();
        let numeric = finite_difference_gradient(
            |p| {
                stack.set_params(p).unwrap();
                weighted_loss(&stack, &x, 99)
            },
            &params,
            1e-5,
        );
        stack.set_params(&params).unwrap();
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "gradient check failed: rel err {err}");
    }

    #[test]
    fn input_gradient_passes_finite_difference_check() {
        let stack = LayerStack::new(
            vec![
                LayerSpec::Conv { c_in: 2, c_out: 2, stride: 1 },
                LayerSpec::Tanh,
                LayerSpec::Dense { inp: 2, out: 2 },
            ],
            5,
        )
        .unwrap();
        let x = random_tensor(2, 3, 3, 15);
        let (_, gx) = loss_grad(&stack, &x, 7);
        let numeric = finite_difference_gradient(
            |xd| {
                let xt = Tensor::new(2, 3, 3, xd.to_vec()).unwrap();
                weighted_loss(&stack, &xt, 7)
            },
            x.data(),
            1e-5,
        );
        let err = max_relative_error(gx.data(), &numeric);
        assert!(err < 1e-4, "input gradient check failed: rel err {err}");
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut stack = LayerStack::<f64>::new(vec![LayerSpec::Dense { inp: 2, out: 2 }], 1).unwrap();
        let x = random_tensor(2, 1, 1, 2);
        let (out, tape) = stack.forward(&x).unwrap();
        let p = stack.params().to_vec();
        stack.set_params(&p).unwrap();
        let g = Tensor::zeros(out.c(), out.h(), out.w());
        assert!(matches!(stack.backward(&tape, &g), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_stack_rejects_mutation() {
        let mut stack = LayerStack::<f64>::new(vec![LayerSpec::Dense { inp: 2, out: 2 }], 1).unwrap();
        stack.freeze();
        let p = stack.params().to_vec();
        assert!(matches!(stack.set_params(&p), Err(Error::Contract(_))));
        assert!(stack.params_for_update().is_err());
    }

    #[test]
    fn output_shape_matches_actual_forward() {
        let stack = LayerStack::new(
            vec![
                LayerSpec::Conv { c_in: 3, c_out: 8, stride: 2 },
                LayerSpec::Relu,
                LayerSpec::Conv { c_in: 8, c_out: 4, stride: 2 },
                LayerSpec::Upsample2x,
                LayerSpec::Dense { inp: 4, out: 6 },
            ],
            2,
        )
        .unwrap();
        let x = random_tensor(3, 16, 8, 3);
        let (y, _) = stack.forward(&x).unwrap();
        assert_eq!(stack.output_shape((3, 16, 8)).unwrap(), y.shape());
        assert_eq!(y.shape(), (6, 8, 4));
    }

    #[test]
    fn shape_errors_are_caught() {
        let stack = LayerStack::new(vec![LayerSpec::Conv { c_in: 3, c_out: 4, stride: 2 }], 0)
            .unwrap();
        // Odd spatial dim under stride 2.
        assert!(stack.forward(&random_tensor(3, 5, 4, 1)).is_err());
        // Wrong channel count.
        assert!(stack.forward(&random_tensor(2, 4, 4, 1)).is_err());
        // Mismatched channel chain at construction.
        assert!(LayerStack::<f64>::new(
            vec![
                LayerSpec::Dense { inp: 3, out: 4 },
                LayerSpec::Dense { inp: 5, out: 2 }
            ],
            0
        )
        .is_err());
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut params = vec![1.0, -2.0, 3.0];
        let before = params.clone();
        let mut opt = Adam::new(0.1, 3);
        opt.step(&mut params, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(params, before);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn adam_single_step_closed_form() {
        // g = 1, lr = 0.1: mhat = vhat = 1, so the step is exactly
        // lr / (1 + eps).
        let mut params = vec![0.5];
        let mut opt = Adam::new(0.1, 1);
        opt.step(&mut params, &[1.0]).unwrap();
        let want: f64 = 0.5 - 0.1 / (1.0 + 1e-8);
        assert!((params[0] - want).abs() < 1e-15);
    }

    #[test]
    fn adam_constant_gradient_moves_monotonically() {
        let mut params = vec![0.0];
        let mut opt = Adam::new(0.01, 1);
        let mut last = params[0];
        for _ in 0..50 {
            opt.step(&mut params, &[2.5]).unwrap();
            assert!(params[0] < last);
            last = params[0];
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut params = vec![0.0];
        let mut opt = Adam::new(0.01, 1);
        assert!(matches!(
            opt.step(&mut params, &[f64::NAN]),
            Err(Error::Divergence(_))
        ));
    }

    #[test]
    fn batch_reduction_is_order_deterministic() {
        let stack = LayerStack::new(
            vec![LayerSpec::Dense { inp: 3, out: 3 }, LayerSpec::Tanh],
            8,
        )
        .unwrap();
        let samples: Vec<Tensor<f64>> = (0..16).map(|i| random_tensor(3, 2, 2, 100 + i)).collect();
        let eval = |t: &Tensor<f64>| {
            let (out, tape) = stack.forward(t).unwrap();
            let loss: f64 = out.data().iter().map(|v| v * v).sum();
            let g = Tensor::new(
                out.c(),
                out.h(),
                out.w(),
                out.data().iter().map(|v| 2.0 * v).collect(),
            )
            .unwrap();
            let (pg, _) = stack.backward(&tape, &g).unwrap();
            (loss, pg)
        };
        let pool1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let pool4 = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let (l1, g1) = pool1.install(|| batch_mean_loss_and_grad(&samples, eval));
        let (l4, g4) = pool4.install(|| batch_mean_loss_and_grad(&samples, eval));
        assert_eq!(l1.to_bits(), l4.to_bits());
        assert_eq!(g1.len(), g4.len());
        for (a, b) in g1.iter().zip(&g4) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn same_seed_same_init_different_seed_different_init() {
        let a = LayerStack::<f64>::new(vec![LayerSpec::Dense { inp: 4, out: 4 }], 9).unwrap();
        let b = LayerStack::<f64>::new(vec![LayerSpec::Dense { inp: 4, out: 4 }], 9).unwrap();
        let c = LayerStack::<f64>::new(vec![LayerSpec::Dense { inp: 4, out: 4 }], 10).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn xavier_bounds_respected_and_biases_zero() {
        let stack =
            LayerStack::<f64>::new(vec![LayerSpec::Dense { inp: 8, out: 8 }], 3).unwrap();
        let a = (6.0 / 16.0f64).sqrt();
        let p = stack.layer_params(0);
        assert!(p[..64].iter().all(|v| v.abs() < a));
        assert!(p[64..].iter().all(|&v| v == 0.0));
        assert!(p[..64].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.nnw");
        let mut enc = LayerStack::<f64>::new(
            vec![
                LayerSpec::Conv { c_in: 3, c_out: 4, stride: 2 },
                LayerSpec::Relu,
                LayerSpec::Dense { inp: 4, out: 2 },
            ],
            21,
        )
        .unwrap();
        enc.freeze();
        let dec = LayerStack::<f64>::new(vec![LayerSpec::Dense { inp: 2, out: 3 }], 22).unwrap();
        let extra = serde_json::json!({"note": 7, "scale": 0.25});
        save_checkpoint(&path, &[("enc", &enc), ("dec", &dec)], &extra).unwrap();
        let (stacks, got_extra) = load_checkpoint::<f64, _>(&path).unwrap();
        assert_eq!(got_extra, extra);
        assert_eq!(stacks.len(), 2);
        assert_eq!(stacks[0].0, "enc");
        assert!(stacks[0].1.is_frozen());
        assert!(!stacks[1].1.is_frozen());
        assert_eq!(stacks[0].1.layers(), enc.layers());
        for (a, b) in stacks[0].1.params().iter().zip(enc.params()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in stacks[1].1.params().iter().zip(dec.params()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // Second save of the loaded model is byte-identical.
        let path2 = dir.path().join("model2.nnw");
        save_checkpoint(&path2, &[("enc", &stacks[0].1), ("dec", &stacks[1].1)], &got_extra)
            .unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.nnw");
        let s = LayerStack::<f64>::new(vec![LayerSpec::Dense { inp: 2, out: 2 }], 0).unwrap();
        save_checkpoint(&path, &[("s", &s)], &serde_json::Value::Null).unwrap();
        let good = fs::read(&path).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        fs::write(&path, &bad_magic).unwrap();
        assert!(matches!(load_checkpoint::<f64, _>(&path), Err(Error::FileFormat { .. })));

        fs::write(&path, &good[..good.len() - 4]).unwrap();
        assert!(matches!(load_checkpoint::<f64, _>(&path), Err(Error::FileFormat { .. })));

        let mut trailing = good.clone();
        trailing.push(0);
        fs::write(&path, &trailing).unwrap();
        assert!(matches!(load_checkpoint::<f64, _>(&path), Err(Error::FileFormat { .. })));
    }

    #[test]
    fn upsample_then_strided_conv_shapes_compose() {
        let stack = LayerStack::new(
            vec![LayerSpec::Upsample2x, LayerSpec::Conv { c_in: 2, c_out: 2, stride: 2 }],
            4,
        )
        .unwrap();
        let x = random_tensor(2, 3, 5, 8);
        let (y, _) = stack.forward(&x).unwrap();
        assert_eq!(y.shape(), (2, 3, 5));
    }
}
