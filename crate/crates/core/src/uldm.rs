//! Conditional latent diffusion over the spatial codec's latents: noise
//! schedule, forward corruption, noise-prediction training, the posterior-mean
//! latent estimate, deterministic re-spaced sampling, and full RGB-to-cube
//! inference.
//!
//! The denoiser is conditioned by channel concatenation of the RGB latent
//! with the noisy latent, plus a sinusoidal timestep embedding added to the
//! first feature map. Sampling is eta = 0, so a (seed, input) pair fixes the
//! draw bit-for-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::json;
use std::path::Path;

use crate::hsio::HyperCube;
use crate::nn::{self, Adam, LayerSpec, LayerStack, Tensor};
use crate::spaae::{SpaaeModel, DOWNSAMPLE, LATENT_CHANNELS};
use crate::speuae::SpeuaeModel;
use crate::{Error, Result, Scalar};

pub const DEFAULT_T: usize = 1000;
pub const DEFAULT_DDIM_STEPS: usize = 20;
pub const TEMB_DIM: usize = 32;
const BETA_START: f64 = 1e-4;
const BETA_END: f64 = 0.02;

/// Linear noise schedule. `alpha_bars` has one extra leading entry so that
/// index t is the cumulative product through step t, with index 0 equal to 1.
#[derive(Debug, Clone)]
pub struct DiffusionSchedule<S> {
    t_count: usize,
    betas: Vec<S>,
    alpha_bars: Vec<S>,
}

impl<S: Scalar> DiffusionSchedule<S> {
    pub fn new(t_count: usize) -> Result<Self> {
        if t_count < 2 {
            return Err(Error::Config(format!("schedule needs at least 2 steps, got {t_count}")));
        }
        let mut betas = Vec::with_capacity(t_count);
        let mut alpha_bars = Vec::with_capacity(t_count + 1);
        alpha_bars.push(S::one());
        for s in 0..t_count {
            let frac = s as f64 / (t_count - 1) as f64;
            let beta = S::cst(BETA_START + (BETA_END - BETA_START) * frac);
            if beta <= S::zero() || beta >= S::one() {
                return Err(Error::Config(format!("beta out of (0,1) at step {s}")));
            }
            alpha_bars.push(*alpha_bars.last().unwrap() * (S::one() - beta));
            betas.push(beta);
        }
        Ok(DiffusionSchedule { t_count, betas, alpha_bars })
    }

    pub fn t_count(&self) -> usize {
        self.t_count
    }

    pub fn betas(&self) -> &[S] {
        &self.betas
    }

    /// Cumulative signal fraction through step t; t = 0 is exactly 1.
    pub fn alpha_bar(&self, t: usize) -> Result<S> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or_else(|| Error::Domain(format!("step {t} outside schedule of {}", self.t_count)))
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_count {
            return Err(Error::Domain(format!(
                "step {t} outside 1..={} of the schedule",
                self.t_count
            )));
        }
        Ok(())
    }

    /// Re-spaced sampling steps: k*T/steps for k = 1..=steps, ascending and
    /// strictly increasing, ending exactly at T.
    pub fn ddim_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 || steps > self.t_count {
            return Err(Error::Config(format!(
                "re-spaced step count {steps} outside 1..={}",
                self.t_count
            )));
        }
        Ok((1..=steps).map(|k| k * self.t_count / steps).collect())
    }
}

/// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.
pub fn forward_noise<S: Scalar>(
    z0: &Tensor<S>,
    t: usize,
    eps: &Tensor<S>,
    sched: &DiffusionSchedule<S>,
) -> Result<Tensor<S>> {
    sched.check_step(t)?;
    if z0.shape() != eps.shape() {
        return Err(Error::Shape("noise tensor must match the latent shape".into()));
    }
    let ab = sched.alpha_bar(t)?;
    let (sa, sn) = (ab.sqrt(), (S::one() - ab).sqrt());
    let data = z0.data().iter().zip(eps.data()).map(|(&z, &e)| sa * z + sn * e).collect();
    let (c, h, w) = z0.shape();
    Tensor::new(c, h, w, data)
}

/// Posterior-mean latent estimate from a noise prediction:
/// z0_hat = (z_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t).
pub fn tweedie_z0<S: Scalar>(
    z_t: &Tensor<S>,
    eps_hat: &Tensor<S>,
    t: usize,
    sched: &DiffusionSchedule<S>,
) -> Result<Tensor<S>> {
    sched.check_step(t)?;
    if z_t.shape() != eps_hat.shape() {
        return Err(Error::Shape("noise prediction must match the latent shape".into()));
    }
    let ab = sched.alpha_bar(t)?;
    let sa = ab.sqrt();
    if !(sa > S::zero()) || !sa.is_finite() {
        return Err(Error::Domain(format!("signal fraction underflow at step {t}")));
    }
    let sn = (S::one() - ab).sqrt();
    let data = z_t.data().iter().zip(eps_hat.data()).map(|(&z, &e)| (z - sn * e) / sa).collect();
    let (c, h, w) = z_t.shape();
    Tensor::new(c, h, w, data)
}

/// Deterministic sin/cos embedding of a timestep; dim must be even.
pub fn sinusoidal_embedding<S: Scalar>(t: usize, dim: usize) -> Tensor<S> {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even");
    let half = dim / 2;
    let mut data = vec![S::zero(); dim];
    for i in 0..half {
        let freq = (-(i as f64) * (10000f64).ln() / half as f64).exp();
        let arg = t as f64 * freq;
        data[2 * i] = S::cst(arg.sin());
        data[2 * i + 1] = S::cst(arg.cos());
    }
    Tensor::new(dim, 1, 1, data).expect("embedding shape is static")
}

/// Anything that can predict the injected noise from (z_t, conditioning, t).
/// Implemented by the trained model and by closures, so analytic references
/// can drive the sampler unchanged.
pub trait Denoiser<S: Scalar>: Sync {
    fn predict(&self, z_t: &Tensor<S>, cond: &Tensor<S>, t: usize) -> Result<Tensor<S>>;
}

impl<S, F> Denoiser<S> for F
where
    S: Scalar,
    F: Fn(&Tensor<S>, &Tensor<S>, usize) -> Result<Tensor<S>> + Sync,
{
    fn predict(&self, z_t: &Tensor<S>, cond: &Tensor<S>, t: usize) -> Result<Tensor<S>> {
        self(z_t, cond, t)
    }
}

/// Conv net over concat(z_t, cond) with an added timestep embedding.
///
/// Three parameter groups: `pre` maps the concatenated input to `width`
/// feature maps, `temb` maps the sinusoidal embedding to a per-channel bias
/// added to those maps, `post` finishes with stride-1 convolutions down to
/// the latent channel count. Parameter vectors concatenate as pre|temb|post.
#[derive(Debug, Clone)]
pub struct DenoiserModel<S> {
    pre: LayerStack<S>,
    temb: LayerStack<S>,
    post: LayerStack<S>,
    c_z: usize,
    c_cond: usize,
    width: usize,
}

impl<S: Scalar> DenoiserModel<S> {
    pub fn new(c_z: usize, c_cond: usize, width: usize, seed: u64) -> Result<Self> {
        let pre = LayerStack::new(
            vec![LayerSpec::Conv { c_in: c_z + c_cond, c_out: width, stride: 1 }],
            seed,
        )?;
        let temb =
            LayerStack::new(vec![LayerSpec::Dense { inp: TEMB_DIM, out: width }], seed.wrapping_add(1))?;
        let post = LayerStack::new(
            vec![
                LayerSpec::Relu,
                LayerSpec::Conv { c_in: width, c_out: width, stride: 1 },
                LayerSpec::Relu,
                LayerSpec::Conv { c_in: width, c_out: width, stride: 1 },
                LayerSpec::Relu,
                LayerSpec::Conv { c_in: width, c_out: c_z, stride: 1 },
            ],
            seed.wrapping_add(2),
        )?;
        Ok(DenoiserModel { pre, temb, post, c_z, c_cond, width })
    }

    pub fn from_stacks(
        pre: LayerStack<S>,
        temb: LayerStack<S>,
        post: LayerStack<S>,
        c_z: usize,
        c_cond: usize,
        width: usize,
    ) -> Result<Self> {
        let m = DenoiserModel { pre, temb, post, c_z, c_cond, width };
        let want_pre = vec![LayerSpec::Conv { c_in: c_z + c_cond, c_out: width, stride: 1 }];
        if m.pre.layers() != want_pre.as_slice() {
            return Err(Error::Contract("pre stack does not match the denoiser layout".into()));
        }
        Ok(m)
    }

    pub fn latent_channels(&self) -> usize {
        self.c_z
    }

    pub fn cond_channels(&self) -> usize {
        self.c_cond
    }

    pub fn stacks(&self) -> [(&'static str, &LayerStack<S>); 3] {
        [("pre", &self.pre), ("temb", &self.temb), ("post", &self.post)]
    }

    pub fn param_count(&self) -> usize {
        self.pre.param_count() + self.temb.param_count() + self.post.param_count()
    }

    pub fn params_concat(&self) -> Vec<S> {
        let mut p = Vec::with_capacity(self.param_count());
        p.extend_from_slice(self.pre.params());
        p.extend_from_slice(self.temb.params());
        p.extend_from_slice(self.post.params());
        p
    }

    pub fn set_params_concat(&mut self, p: &[S]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "parameter vector has {} entries, model holds {}",
                p.len(),
                self.param_count()
            )));
        }
        let (a, b) = (self.pre.param_count(), self.temb.param_count());
        self.pre.set_params(&p[..a])?;
        self.temb.set_params(&p[a..a + b])?;
        self.post.set_params(&p[a + b..])?;
        Ok(())
    }

    pub fn freeze(&mut self) {
        self.pre.freeze();
        self.temb.freeze();
        self.post.freeze();
    }

    pub fn is_frozen(&self) -> bool {
        self.pre.is_frozen() && self.temb.is_frozen() && self.post.is_frozen()
    }

    fn check_shapes(&self, z_t: &Tensor<S>, cond: &Tensor<S>) -> Result<()> {
        let (zc, zh, zw) = z_t.shape();
        let (cc, ch, cw) = cond.shape();
        if zc != self.c_z || cc != self.c_cond || zh != ch || zw != cw {
            return Err(Error::Shape(format!(
                "latents {zc}x{zh}x{zw} and conditioning {cc}x{ch}x{cw} do not fit a {}/{} channel model",
                self.c_z, self.c_cond
            )));
        }
        Ok(())
    }

    fn forward_tapes(
        &self,
        z_t: &Tensor<S>,
        cond: &Tensor<S>,
        t: usize,
    ) -> Result<(Tensor<S>, nn::Tape<S>, nn::Tape<S>, nn::Tape<S>)> {
        self.check_shapes(z_t, cond)?;
        let (_, h, w) = z_t.shape();
        let mut data = Vec::with_capacity((self.c_z + self.c_cond) * h * w);
        data.extend_from_slice(z_t.data());
        data.extend_from_slice(cond.data());
        let cat = Tensor::new(self.c_z + self.c_cond, h, w, data)?;
        let (mut a, tape_pre) = self.pre.forward(&cat)?;
        let (b, tape_temb) = self.temb.forward(&sinusoidal_embedding(t, TEMB_DIM))?;
        let hw = h * w;
        for c in 0..self.width {
            let bias = b.data()[c];
            for v in &mut a.data_mut()[c * hw..(c + 1) * hw] {
                *v += bias;
            }
        }
        let (out, tape_post) = self.post.forward(&a)?;
        Ok((out, tape_pre, tape_temb, tape_post))
    }

    /// Training objective for one sample: corrupt z0 at step t with eps, and
    /// return mean squared noise-prediction error plus the gradient over the
    /// concatenated parameters.
    pub fn noise_mse_and_grad(
        &self,
        z0: &Tensor<S>,
        cond: &Tensor<S>,
        t: usize,
        eps: &Tensor<S>,
        sched: &DiffusionSchedule<S>,
    ) -> Result<(S, Vec<S>)> {
        let z_t = forward_noise(z0, t, eps, sched)?;
        let (out, tape_pre, tape_temb, tape_post) = self.forward_tapes(&z_t, cond, t)?;
        let n = S::cst(out.numel() as f64);
        let two = S::cst(2.0);
        let mut loss = S::zero();
        let mut g = vec![S::zero(); out.numel()];
        for i in 0..out.numel() {
            let d = out.data()[i] - eps.data()[i];
            loss += d * d;
            g[i] = two * d / n;
        }
        loss /= n;
        let (c, h, w) = out.shape();
        let g_out = Tensor::new(c, h, w, g)?;
        let (g_post, g_a) = self.post.backward(&tape_post, &g_out)?;
        // The embedding bias is broadcast over space, so its gradient is the
        // per-channel sum of the feature-map gradient.
        let hw = h * w;
        let mut g_b = vec![S::zero(); self.width];
        for cch in 0..self.width {
            for p in 0..hw {
                g_b[cch] += g_a.data()[cch * hw + p];
            }
        }
        let (g_temb, _) = self.temb.backward(&tape_temb, &Tensor::new(self.width, 1, 1, g_b)?)?;
        let (g_pre, _) = self.pre.backward(&tape_pre, &g_a)?;
        let mut grads = Vec::with_capacity(self.param_count());
        grads.extend(g_pre);
        grads.extend(g_temb);
        grads.extend(g_post);
        Ok((loss, grads))
    }
}

impl<S: Scalar> Denoiser<S> for DenoiserModel<S> {
    fn predict(&self, z_t: &Tensor<S>, cond: &Tensor<S>, t: usize) -> Result<Tensor<S>> {
        Ok(self.forward_tapes(z_t, cond, t)?.0)
    }
}

/// Deterministic re-spaced sampling (eta = 0) from a standard normal start.
/// The final update lands on the clean-step cumulative value of exactly 1, so
/// the last posterior-mean estimate is returned as the draw.
pub fn ddim_sample<S: Scalar, D: Denoiser<S> + ?Sized>(
    denoiser: &D,
    cond: &Tensor<S>,
    z_shape: (usize, usize, usize),
    sched: &DiffusionSchedule<S>,
    steps: usize,
    seed: u64,
) -> Result<Tensor<S>> {
    let taus = sched.ddim_timesteps(steps)?;
    let (c, h, w) = z_shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<S> =
        (0..c * h * w).map(|_| S::cst(rng.sample::<f64, _>(StandardNormal))).collect();
    let mut z = Tensor::new(c, h, w, data)?;
    for k in (0..taus.len()).rev() {
        let t = taus[k];
        let eps_hat = denoiser.predict(&z, cond, t)?;
        if eps_hat.shape() != z.shape() {
            return Err(Error::Contract("denoiser changed the latent shape".into()));
        }
        let z0_hat = tweedie_z0(&z, &eps_hat, t, sched)?;
        let ab_prev = sched.alpha_bar(if k == 0 { 0 } else { taus[k - 1] })?;
        let (sa, sn) = (ab_prev.sqrt(), (S::one() - ab_prev).sqrt());
        let data = z0_hat
            .data()
            .iter()
            .zip(eps_hat.data())
            .map(|(&z0v, &ev)| sa * z0v + sn * ev)
            .collect();
        z = Tensor::new(c, h, w, data)?;
        if !z.is_finite() {
            return Err(Error::Divergence(format!("sample became non-finite at step {t}")));
        }
    }
    Ok(z)
}

/// Per-channel standardization fitted on training latents and applied around
/// the diffusion model, which assumes roughly unit-scale data.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentNorm<S> {
    mean: Vec<S>,
    std: Vec<S>,
}

impl<S: Scalar> LatentNorm<S> {
    pub fn identity(channels: usize) -> Self {
        LatentNorm { mean: vec![S::zero(); channels], std: vec![S::one(); channels] }
    }

    pub fn fit(latents: &[Tensor<S>]) -> Result<Self> {
        let c = latents
            .first()
            .map(|t| t.shape().0)
            .ok_or_else(|| Error::Config("cannot fit normalization on an empty set".into()))?;
        let mut count = vec![S::zero(); c];
        let mut mean = vec![S::zero(); c];
        let mut m2 = vec![S::zero(); c];
        for t in latents {
            let (tc, h, w) = t.shape();
            if tc != c {
                return Err(Error::Shape("latents disagree on channel count".into()));
            }
            let hw = h * w;
            for ch in 0..c {
                for &v in &t.data()[ch * hw..(ch + 1) * hw] {
                    // Welford update keeps the pass single and stable.
                    count[ch] += S::one();
                    let d = v - mean[ch];
                    mean[ch] += d / count[ch];
                    m2[ch] += d * (v - mean[ch]);
                }
            }
        }
        let floor = S::cst(1e-6);
        let std = (0..c).map(|ch| (m2[ch] / count[ch]).sqrt().max(floor)).collect();
        Ok(LatentNorm { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[S] {
        &self.mean
    }

    pub fn std(&self) -> &[S] {
        &self.std
    }

    pub fn from_parts(mean: Vec<S>, std: Vec<S>) -> Result<Self> {
        if mean.len() != std.len() || mean.is_empty() {
            return Err(Error::Shape("normalization mean/std length mismatch".into()));
        }
        if std.iter().any(|s| !(*s > S::zero())) {
            return Err(Error::Data("normalization std must be positive".into()));
        }
        Ok(LatentNorm { mean, std })
    }

    pub fn apply(&self, t: &Tensor<S>) -> Result<Tensor<S>> {
        self.map(t, |v, m, s| (v - m) / s)
    }

    pub fn invert(&self, t: &Tensor<S>) -> Result<Tensor<S>> {
        self.map(t, |v, m, s| v * s + m)
    }

    fn map(&self, t: &Tensor<S>, f: impl Fn(S, S, S) -> S) -> Result<Tensor<S>> {
        let (c, h, w) = t.shape();
        if c != self.mean.len() {
            return Err(Error::Shape(format!(
                "tensor has {c} channels, normalization has {}",
                self.mean.len()
            )));
        }
        let hw = h * w;
        let mut out = t.clone();
        for ch in 0..c {
            let (m, s) = (self.mean[ch], self.std[ch]);
            for v in &mut out.data_mut()[ch * hw..(ch + 1) * hw] {
                *v = f(*v, m, s);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct UldmConfig {
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for UldmConfig {
    fn default() -> Self {
        UldmConfig { iters: 400, batch: 8, lr: 1.5e-5, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainPoint {
    pub iter: usize,
    pub loss: f64,
}

/// Noise-prediction training over (target latent, conditioning latent) pairs.
/// All batch randomness (sample index, step, noise) is drawn sequentially
/// from one seeded stream before the parallel gradient pass, so the result
/// is independent of the thread count. A non-finite loss aborts.
pub fn train_uldm<S: Scalar>(
    data: &[(Tensor<S>, Tensor<S>)],
    model: &mut DenoiserModel<S>,
    sched: &DiffusionSchedule<S>,
    cfg: &UldmConfig,
) -> Result<Vec<TrainPoint>> {
    if data.is_empty() || cfg.batch == 0 || cfg.iters == 0 {
        return Err(Error::Config("training needs data and positive batch/iteration counts".into()));
    }
    for (z, c) in data {
        model.check_shapes(z, c)?;
    }
    let mut opt = Adam::new(S::cst(cfg.lr), model.param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut curve = Vec::new();
    let (a, b) = (model.pre.param_count(), model.temb.param_count());
    for it in 0..cfg.iters {
        let batch: Vec<(usize, usize, Tensor<S>)> = (0..cfg.batch)
            .map(|_| {
                let idx = rng.gen_range(0..data.len());
                let t = rng.gen_range(1..=sched.t_count());
                let (c, h, w) = data[idx].0.shape();
                let noise: Vec<S> =
                    (0..c * h * w).map(|_| S::cst(rng.sample::<f64, _>(StandardNormal))).collect();
                (idx, t, Tensor::new(c, h, w, noise).expect("shape from dataset"))
            })
            .collect();
        let m = &*model;
        let (loss, grads) = nn::batch_mean_loss_and_grad(&batch, |(idx, t, eps)| {
            m.noise_mse_and_grad(&data[*idx].0, &data[*idx].1, *t, eps, sched)
                .expect("shapes validated before training")
        });
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("loss became {loss} at iteration {it}")));
        }
        opt.step_multi(
            &mut [
                model.pre.params_for_update()?,
                model.temb.params_for_update()?,
                model.post.params_for_update()?,
            ],
            &[&grads[..a], &grads[a..a + b], &grads[a + b..]],
        )?;
        if it % 10 == 0 || it + 1 == cfg.iters {
            curve.push(TrainPoint { iter: it, loss: loss.f64() });
        }
    }
    Ok(curve)
}

/// Trained diffusion stage: denoiser plus everything inference needs.
#[derive(Debug, Clone)]
pub struct UldmModel<S> {
    pub denoiser: DenoiserModel<S>,
    pub schedule: DiffusionSchedule<S>,
    pub ddim_steps: usize,
    pub norm_un: LatentNorm<S>,
    pub norm_rgb: LatentNorm<S>,
}

impl<S: Scalar> UldmModel<S> {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let to_f64 = |v: &[S]| v.iter().map(|x| x.f64()).collect::<Vec<f64>>();
        let extra = json!({
            "t_count": self.schedule.t_count(),
            "ddim_steps": self.ddim_steps,
            "c_z": self.denoiser.c_z,
            "c_cond": self.denoiser.c_cond,
            "width": self.denoiser.width,
            "norm_un": {"mean": to_f64(&self.norm_un.mean), "std": to_f64(&self.norm_un.std)},
            "norm_rgb": {"mean": to_f64(&self.norm_rgb.mean), "std": to_f64(&self.norm_rgb.std)},
        });
        let [p, t, q] = self.denoiser.stacks();
        nn::save_checkpoint(path, &[p, t, q], &extra)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let pathr = path.as_ref();
        let (stacks, extra) = nn::load_checkpoint::<S, _>(pathr)?;
        let mut pre = None;
        let mut temb = None;
        let mut post = None;
        for (name, s) in stacks {
            match name.as_str() {
                "pre" => pre = Some(s),
                "temb" => temb = Some(s),
                "post" => post = Some(s),
                other => {
                    return Err(Error::file_format(pathr, format!("unexpected stack '{other}'")))
                }
            }
        }
        let (pre, temb, post) = match (pre, temb, post) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => return Err(Error::file_format(pathr, "checkpoint is missing a denoiser stack")),
        };
        let bad = |what: &str| Error::file_format(pathr, format!("sidecar missing {what}"));
        let usize_of = |key: &str| -> Result<usize> {
            extra[key].as_u64().map(|v| v as usize).ok_or_else(|| bad(key))
        };
        let norm_of = |key: &str| -> Result<LatentNorm<S>> {
            let arr = |sub: &str| -> Result<Vec<S>> {
                extra[key][sub]
                    .as_array()
                    .ok_or_else(|| bad(key))?
                    .iter()
                    .map(|v| v.as_f64().map(S::cst).ok_or_else(|| bad(key)))
                    .collect()
            };
            LatentNorm::from_parts(arr("mean")?, arr("std")?)
        };
        let denoiser = DenoiserModel::from_stacks(
            pre,
            temb,
            post,
            usize_of("c_z")?,
            usize_of("c_cond")?,
            usize_of("width")?,
        )?;
        Ok(UldmModel {
            denoiser,
            schedule: DiffusionSchedule::new(usize_of("t_count")?)?,
            ddim_steps: usize_of("ddim_steps")?,
            norm_un: norm_of("norm_un")?,
            norm_rgb: norm_of("norm_rgb")?,
        })
    }
}

/// Full inference: encode the RGB image spatially, draw latent samples of the
/// unobservable feature, decode each through the frozen codecs, and average
/// the cubes voxel-wise in sample order.
pub fn infer_hsi<S: Scalar>(
    rgb: &HyperCube<S>,
    spaae: &SpaaeModel<S>,
    speuae: &SpeuaeModel<S>,
    uldm: &UldmModel<S>,
    num_samples: usize,
    seed: u64,
) -> Result<HyperCube<S>> {
    if num_samples == 0 {
        return Err(Error::Config("averaging needs at least one sample".into()));
    }
    if rgb.bands() != 3 {
        return Err(Error::Shape(format!("expected a 3-band RGB cube, got {}", rgb.bands())));
    }
    if rgb.nx() % DOWNSAMPLE != 0 || rgb.ny() % DOWNSAMPLE != 0 {
        return Err(Error::Shape(format!(
            "image {}x{} not divisible by the codec factor {DOWNSAMPLE}",
            rgb.nx(),
            rgb.ny()
        )));
    }
    if !spaae.is_frozen() || !speuae.is_frozen() || !uldm.denoiser.is_frozen() {
        return Err(Error::Contract("inference requires frozen models".into()));
    }
    let z_rgb = uldm.norm_rgb.apply(&spaae.encode(&rgb.to_tensor())?)?;
    let z_shape = (LATENT_CHANNELS, rgb.ny() / DOWNSAMPLE, rgb.nx() / DOWNSAMPLE);
    let mut mean: Option<HyperCube<S>> = None;
    for s in 0..num_samples {
        let z = ddim_sample(
            &uldm.denoiser,
            &z_rgb,
            z_shape,
            &uldm.schedule,
            uldm.ddim_steps,
            seed.wrapping_add(s as u64),
        )?;
        let feat = spaae.decode(&uldm.norm_un.invert(&z)?)?;
        let cube = speuae.decode(&feat, rgb)?;
        mean = Some(match mean {
            None => cube,
            Some(mut acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(cube.data()) {
                    *a += *b;
                }
                acc
            }
        });
    }
    let mut out = mean.expect("at least one sample");
    let inv = S::one() / S::cst(num_samples as f64);
    for v in out.data_mut() {
        *v *= inv;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hsio::synthesize_rgb;
    use crate::linalg::Mat;
    use crate::spectral::{split_ssf, SpectralSensitivity};

    fn sched() -> DiffusionSchedule<f64> {
        DiffusionSchedule::new(DEFAULT_T).unwrap()
    }

    fn randn(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..c * h * w).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Tensor::new(c, h, w, data).unwrap()
    }

    fn norm2(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn schedule_invariants_hold() {
        let s = sched();
        assert_eq!(s.t_count(), 1000);
        assert_eq!(s.betas().len(), 1000);
        assert!(s.betas().iter().all(|&b| b > 0.0 && b < 1.0));
        assert_eq!(s.betas()[0], 1e-4);
        assert_eq!(s.betas()[999], 0.02);
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
        for t in 1..=1000 {
            assert!(s.alpha_bar(t).unwrap() < s.alpha_bar(t - 1).unwrap());
        }
        assert!(s.alpha_bar(1).unwrap() > 0.999);
        // Terminal signal fraction is negligible: sqrt(abar_T) < 1%.
        assert!(s.alpha_bar(1000).unwrap().sqrt() < 0.01);
        assert!(matches!(s.alpha_bar(1001), Err(Error::Domain(_))));
    }

    #[test]
    fn ddim_timesteps_are_strictly_increasing_and_end_at_t() {
        let s = sched();
        for steps in [1, 7, 20, 333, 1000] {
            let taus = s.ddim_timesteps(steps).unwrap();
            assert_eq!(taus.len(), steps);
            assert_eq!(*taus.last().unwrap(), 1000);
            assert!(taus.windows(2).all(|w| w[0] < w[1]));
            assert!(taus[0] >= 1);
        }
        assert!(s.ddim_timesteps(0).is_err());
        assert!(s.ddim_timesteps(1001).is_err());
    }

    #[test]
    fn forward_noise_matches_its_definition_and_edges() {
        let s = sched();
        let z0 = randn(2, 3, 3, 1);
        let eps = randn(2, 3, 3, 2);
        // Step bounds.
        assert!(forward_noise(&z0, 0, &eps, &s).is_err());
        assert!(forward_noise(&z0, 1001, &eps, &s).is_err());
        // Zero noise scales the signal exactly.
        let zt = forward_noise(&z0, 500, &Tensor::zeros(2, 3, 3), &s).unwrap();
        let sa = s.alpha_bar(500).unwrap().sqrt();
        for (a, b) in zt.data().iter().zip(z0.data()) {
            assert_eq!(*a, sa * b);
        }
        // Early step stays near the signal (triangle bound).
        let z1 = forward_noise(&z0, 1, &eps, &s).unwrap();
        let diff: Vec<f64> = z1.data().iter().zip(z0.data()).map(|(a, b)| a - b).collect();
        let ab1 = s.alpha_bar(1).unwrap();
        let bound =
            (1.0 - ab1).sqrt() * norm2(eps.data()) + (1.0 - ab1.sqrt()) * norm2(z0.data());
        assert!(norm2(&diff) <= bound + 1e-12);
        // Late step is dominated by the noise.
        let zt = forward_noise(&z0, 1000, &eps, &s).unwrap();
        let abt = s.alpha_bar(1000).unwrap();
        let diff: Vec<f64> = zt.data().iter().zip(eps.data()).map(|(a, b)| a - b).collect();
        let bound =
            abt.sqrt() * norm2(z0.data()) + (1.0 - (1.0 - abt).sqrt()) * norm2(eps.data());
        assert!(norm2(&diff) <= bound + 1e-12);
    }

    #[test]
    fn forward_noise_variance_matches_the_schedule() {
        let s = sched();
        let z0 = Tensor::new(1, 1, 1, vec![0.7]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for t in [1, 250, 1000] {
            let ab = s.alpha_bar(t).unwrap();
            let n = 10_000;
            let mut sum = 0.0;
            let mut sq = 0.0;
            for _ in 0..n {
                let e = Tensor::new(1, 1, 1, vec![rng.sample::<f64, _>(StandardNormal)]).unwrap();
                let v = forward_noise(&z0, t, &e, &s).unwrap().data()[0] - ab.sqrt() * 0.7;
                sum += v;
                sq += v * v;
            }
            let var = (sq - sum * sum / n as f64) / (n - 1) as f64;
            // 3-sigma band for the sample variance of a Gaussian.
            let band = 3.0 * (1.0 - ab) * (2.0 / (n as f64 - 1.0)).sqrt();
            assert!(
                (var - (1.0 - ab)).abs() < band,
                "t={t}: var {var} vs {} band {band}",
                1.0 - ab
            );
        }
    }

    #[test]
    fn tweedie_inverts_forward_noise_at_every_step() {
        let s = sched();
        let z0 = randn(2, 2, 2, 4);
        let eps = randn(2, 2, 2, 5);
        for t in [1, 2, 100, 500, 999, 1000] {
            let zt = forward_noise(&z0, t, &eps, &s).unwrap();
            let rec = tweedie_z0(&zt, &eps, t, &s).unwrap();
            for (a, b) in rec.data().iter().zip(z0.data()) {
                // Exact up to one rounding of the add/sub/divide chain; the
                // division by sqrt(abar_T) ~ 7e-3 amplifies that rounding.
                assert!((a - b).abs() < 1e-12, "t={t}: {a} vs {b}");
            }
        }
        // eps_hat = 0 reduces to pure rescaling.
        let zt = forward_noise(&z0, 300, &eps, &s).unwrap();
        let rec = tweedie_z0(&zt, &Tensor::zeros(2, 2, 2), 300, &s).unwrap();
        let sa = s.alpha_bar(300).unwrap().sqrt();
        for (a, b) in rec.data().iter().zip(zt.data()) {
            assert_eq!(*a, b / sa);
        }
    }

    #[test]
    fn embedding_is_deterministic_and_step_sensitive() {
        let a: Tensor<f64> = sinusoidal_embedding(17, TEMB_DIM);
        let b: Tensor<f64> = sinusoidal_embedding(17, TEMB_DIM);
        let c: Tensor<f64> = sinusoidal_embedding(18, TEMB_DIM);
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
        assert_eq!(a.shape(), (TEMB_DIM, 1, 1));
        // Every pair is a unit vector, so the embedding norm is fixed.
        let n: f64 = a.data().iter().map(|v| v * v).sum();
        assert!((n - (TEMB_DIM / 2) as f64).abs() < 1e-12);
    }

    #[test]
    fn denoiser_output_matches_latent_shape() {
        let m = DenoiserModel::<f64>::new(4, 4, 8, 1).unwrap();
        let z = randn(4, 4, 4, 6);
        let cond = randn(4, 4, 4, 7);
        let out = m.predict(&z, &cond, 10).unwrap();
        assert_eq!(out.shape(), z.shape());
        // Timestep changes the prediction through the embedding.
        let out2 = m.predict(&z, &cond, 900).unwrap();
        assert_ne!(out.data(), out2.data());
        // Shape mismatches are rejected.
        assert!(m.predict(&randn(3, 4, 4, 8), &cond, 10).is_err());
        assert!(m.predict(&z, &randn(4, 2, 2, 9), 10).is_err());
    }

    #[test]
    fn denoiser_gradient_matches_finite_differences() {
        let s = sched();
        let mut m = DenoiserModel::<f64>::new(2, 2, 4, 2).unwrap();
        let z0 = randn(2, 4, 4, 10);
        let cond = randn(2, 4, 4, 11);
        let eps = randn(2, 4, 4, 12);
        let (_, analytic) = m.noise_mse_and_grad(&z0, &cond, 350, &eps, &s).unwrap();
        let p0 = m.params_concat();
        // Step small enough that no rectifier kink falls inside the stencil.
        let numeric = nn::finite_difference_gradient(
            |p| {
                m.set_params_concat(p).unwrap();
                m.noise_mse_and_grad(&z0, &cond, 350, &eps, &s).unwrap().0
            },
            &p0,
            1e-6,
        );
        let err = nn::max_relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "denoiser gradient rel err {err}");
    }

    #[test]
    fn ddim_with_zero_denoiser_is_pure_rescaling() {
        // eps_hat = 0 makes every update a deterministic rescale, so the
        // draw telescopes to z_T / sqrt(abar_T) no matter the step count.
        let s = sched();
        let zero = |z: &Tensor<f64>, _c: &Tensor<f64>, _t: usize| -> crate::Result<Tensor<f64>> {
            Ok(Tensor::zeros(z.shape().0, z.shape().1, z.shape().2))
        };
        let cond = Tensor::zeros(1, 2, 2);
        let a = ddim_sample(&zero, &cond, (1, 2, 2), &s, 20, 9).unwrap();
        let b = ddim_sample(&zero, &cond, (1, 2, 2), &s, 400, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let start: Vec<f64> = (0..4).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let scale = 1.0 / s.alpha_bar(1000).unwrap().sqrt();
        for i in 0..4 {
            assert!((a.data()[i] - start[i] * scale).abs() < 1e-9 * scale);
            assert!((b.data()[i] - start[i] * scale).abs() < 1e-9 * scale);
        }
    }

    #[test]
    fn ddim_is_seed_deterministic_and_seed_sensitive() {
        let s = sched();
        let m = DenoiserModel::<f64>::new(2, 2, 6, 3).unwrap();
        let cond = randn(2, 4, 4, 13);
        let a = ddim_sample(&m, &cond, (2, 4, 4), &s, 20, 1).unwrap();
        let b = ddim_sample(&m, &cond, (2, 4, 4), &s, 20, 1).unwrap();
        let c = ddim_sample(&m, &cond, (2, 4, 4), &s, 20, 2).unwrap();
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn latent_norm_fits_and_round_trips() {
        let a = randn(3, 4, 4, 20);
        let b = a.clone();
        let norm = LatentNorm::fit(&[a.clone(), b]).unwrap();
        // Duplicated tensors: stats equal the per-channel stats of one.
        let hw = 16;
        for ch in 0..3 {
            let vals = &a.data()[ch * hw..(ch + 1) * hw];
            let mean: f64 = vals.iter().sum::<f64>() / hw as f64;
            let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / hw as f64;
            assert!((norm.mean()[ch] - mean).abs() < 1e-12);
            assert!((norm.std()[ch] - var.sqrt()).abs() < 1e-12);
        }
        let n = norm.apply(&a).unwrap();
        for ch in 0..3 {
            let vals = &n.data()[ch * hw..(ch + 1) * hw];
            let mean: f64 = vals.iter().sum::<f64>() / hw as f64;
            assert!(mean.abs() < 1e-12);
        }
        let back = norm.invert(&n).unwrap();
        for (x, y) in back.data().iter().zip(a.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        // Constant channel hits the std floor instead of dividing by zero.
        let flat = Tensor::new(1, 2, 2, vec![0.5; 4]).unwrap();
        let nf = LatentNorm::fit(&[flat.clone()]).unwrap();
        assert!(nf.apply(&flat).unwrap().is_finite());
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let s = sched();
        let run = || {
            let mut m = DenoiserModel::<f64>::new(2, 2, 6, 4).unwrap();
            let data = vec![(randn(2, 4, 4, 30), randn(2, 4, 4, 31))];
            let cfg = UldmConfig { iters: 200, batch: 4, lr: 2e-3, seed: 7 };
            let curve = train_uldm(&data, &mut m, &s, &cfg).unwrap();
            (m.params_concat(), curve)
        };
        let (pa, curve) = run();
        let (pb, _) = run();
        for (x, y) in pa.iter().zip(&pb) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        let head: f64 =
            curve[..5].iter().map(|p| p.loss).sum::<f64>() / 5.0;
        let tail: f64 =
            curve[curve.len() - 5..].iter().map(|p| p.loss).sum::<f64>() / 5.0;
        assert!(tail < head, "loss trend not decreasing: {head} -> {tail}");
    }

    #[test]
    fn training_aborts_on_non_finite_loss() {
        let s = sched();
        let mut m = DenoiserModel::<f64>::new(2, 2, 4, 5).unwrap();
        let huge: Vec<f64> = m.params_concat().iter().map(|v| v * 1e200).collect();
        m.set_params_concat(&huge).unwrap();
        let data = vec![(randn(2, 4, 4, 40), randn(2, 4, 4, 41))];
        let cfg = UldmConfig { iters: 10, batch: 2, lr: 1e-3, seed: 0 };
        assert!(matches!(train_uldm(&data, &mut m, &s, &cfg), Err(Error::Divergence(_))));
    }

    #[test]
    fn conditioning_collapses_variance_when_target_is_a_function_of_cond() {
        // Z_un deterministically mirrors Z_rgb; after training, draws at a
        // fixed conditioning should cluster far below the unit prior spread.
        let s = sched();
        let mut m = DenoiserModel::<f64>::new(1, 1, 10, 6).unwrap();
        let mut data = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        for _ in 0..64 {
            let v: f64 = rng.gen_range(-1.0..1.0);
            let cond = Tensor::new(1, 1, 1, vec![v]).unwrap();
            let zun = Tensor::new(1, 1, 1, vec![-v]).unwrap();
            data.push((zun, cond));
        }
        let cfg = UldmConfig { iters: 1200, batch: 16, lr: 2e-3, seed: 8 };
        train_uldm(&data, &mut m, &s, &cfg).unwrap();
        let cond = Tensor::new(1, 1, 1, vec![0.6]).unwrap();
        let draws: Vec<f64> = (0..200)
            .map(|i| ddim_sample(&m, &cond, (1, 1, 1), &s, 20, 100 + i).unwrap().data()[0])
            .collect();
        let mean: f64 = draws.iter().sum::<f64>() / draws.len() as f64;
        let var: f64 =
            draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        assert!(var < 0.1, "conditional variance {var} did not collapse");
        assert!((mean + 0.6).abs() < 0.2, "conditional mean {mean} far from target -0.6");
    }

    #[test]
    fn checkpoint_roundtrip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("uldm.nnw");
        let mut denoiser = DenoiserModel::<f64>::new(4, 4, 8, 7).unwrap();
        denoiser.freeze();
        let model = UldmModel {
            denoiser,
            schedule: sched(),
            ddim_steps: 20,
            norm_un: LatentNorm::from_parts(vec![0.1; 4], vec![1.5; 4]).unwrap(),
            norm_rgb: LatentNorm::from_parts(vec![-0.2; 4], vec![0.7; 4]).unwrap(),
        };
        model.save(&path).unwrap();
        let loaded = UldmModel::<f64>::load(&path).unwrap();
        assert_eq!(loaded.ddim_steps, 20);
        assert_eq!(loaded.schedule.t_count(), 1000);
        assert_eq!(loaded.norm_un, model.norm_un);
        assert_eq!(loaded.norm_rgb, model.norm_rgb);
        let cond = randn(4, 4, 4, 60);
        let a = ddim_sample(&model.denoiser, &cond, (4, 4, 4), &model.schedule, 20, 3).unwrap();
        let b = ddim_sample(&loaded.denoiser, &cond, (4, 4, 4), &loaded.schedule, 20, 3).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    fn tiny_pipeline(seed: u64) -> (SpaaeModel<f64>, SpeuaeModel<f64>, UldmModel<f64>) {
        let mut spa = SpaaeModel::new(6, seed).unwrap();
        spa.freeze();
        let b = 8;
        let wl: Vec<f64> = (0..b).map(|i| 400.0 + 10.0 * i as f64).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let p = Mat::from_vec(3, b, (0..3 * b).map(|_| rng.gen_range(0.1..1.0)).collect());
        let ssf = split_ssf(SpectralSensitivity::from_matrix(wl, p).unwrap()).unwrap();
        let mut spe = SpeuaeModel::new(ssf, 10, 0.1, seed + 2).unwrap();
        spe.freeze();
        let mut denoiser = DenoiserModel::new(LATENT_CHANNELS, LATENT_CHANNELS, 8, seed + 3).unwrap();
        denoiser.freeze();
        let uldm = UldmModel {
            denoiser,
            schedule: sched(),
            ddim_steps: 20,
            norm_un: LatentNorm::identity(LATENT_CHANNELS),
            norm_rgb: LatentNorm::identity(LATENT_CHANNELS),
        };
        (spa, spe, uldm)
    }

    #[test]
    fn inference_is_deterministic_and_rgb_consistent_untrained() {
        let (spa, spe, uldm) = tiny_pipeline(70);
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let wl: Vec<f64> = spe.ssf().wavelengths().to_vec();
        let cube = HyperCube::new(
            wl,
            8,
            8,
            (0..8 * 64).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let rgb = synthesize_rgb(&cube, spe.ssf()).unwrap();
        let a = infer_hsi(&rgb, &spa, &spe, &uldm, 1, 42).unwrap();
        let b = infer_hsi(&rgb, &spa, &spe, &uldm, 1, 42).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        // The decoder's skip path makes any output render back to its input,
        // trained or not: averaging preserves that.
        let c = infer_hsi(&rgb, &spa, &spe, &uldm, 3, 43).unwrap();
        let back = synthesize_rgb(&c, spe.ssf()).unwrap();
        for (x, y) in back.data().iter().zip(rgb.data()) {
            assert!((x - y).abs() < 1e-6);
        }
        assert!(infer_hsi(&rgb, &spa, &spe, &uldm, 0, 1).is_err());
    }

    #[test]
    fn inference_rejects_unfrozen_models_and_bad_dims() {
        let (mut spa, spe, uldm) = tiny_pipeline(90);
        let wl: Vec<f64> = spe.ssf().wavelengths().to_vec();
        let cube = HyperCube::new(wl, 8, 8, vec![0.5; 8 * 64]).unwrap();
        let rgb = synthesize_rgb(&cube, spe.ssf()).unwrap();
        // Odd size breaks the downsampling contract.
        let bad = HyperCube::new(vec![1.0, 2.0, 3.0], 6, 6, vec![0.5; 108]).unwrap();
        assert!(matches!(
            infer_hsi(&bad, &spa, &spe, &uldm, 1, 0),
            Err(Error::Shape(_))
        ));
        // Unfrozen codec is a contract violation.
        spa = {
            let fresh = SpaaeModel::new(6, 91).unwrap();
            fresh
        };
        assert!(matches!(
            infer_hsi(&rgb, &spa, &spe, &uldm, 1, 0),
            Err(Error::Contract(_))
        ));
    }
}
