//! Stage-1 spectral autoencoder. The encoder squeezes each pixel's spectrum
//! into a 3-channel feature in (0, 1); the decoder predicts only the
//! camera-null component from (feature, rgb) and adds the pseudo-inverse lift
//! of the RGB pixel, so every decode renders back to its conditioning RGB
//! exactly, whatever the weights do.
//!
//! Both networks are pixel-wise (dense layers act per spatial position), and
//! the stage-1 loss couples reconstruction with an alignment term that pulls
//! the feature maps toward what the frozen spatial codec can represent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use std::path::Path;

use crate::hsio::HyperCube;
use crate::linalg::Mat;
use crate::nn::{self, Adam, LayerSpec, LayerStack, Tensor};
use crate::spaae::SpaaeModel;
use crate::spectral::{self, SpectralSensitivity};
use crate::{Error, Result, Scalar};

/// Width of the compressed unobservable feature; fixed to match RGB so the
/// frozen spatial codec can embed either.
pub const FEATURE_CHANNELS: usize = 3;

/// Per-pixel encoder/decoder around a split camera response.
#[derive(Debug, Clone)]
pub struct SpeuaeModel<S> {
    enc: LayerStack<S>,
    dec: LayerStack<S>,
    ssf: SpectralSensitivity<S>,
    lambda: S,
}

#[derive(Debug, Clone)]
pub struct Stage1Config {
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config { iters: 400, batch: 8, lr: 4e-4, seed: 0 }
    }
}

/// One row of the stage-1 loss curve.
#[derive(Debug, Clone, Copy)]
pub struct Stage1Point {
    pub iter: usize,
    pub total: f64,
    pub hsi_re: f64,
    pub align: f64,
}

impl<S: Scalar> SpeuaeModel<S> {
    /// Fresh model over a split response. `hidden` is the MLP width; the
    /// encoder ends in a unit-tanh so features live in (0, 1) like RGB.
    pub fn new(ssf: SpectralSensitivity<S>, hidden: usize, lambda: S, seed: u64) -> Result<Self> {
        if !ssf.is_split() {
            return Err(Error::Contract("response must be split before building a model".into()));
        }
        let b = ssf.bands();
        let enc = LayerStack::new(
            vec![
                LayerSpec::Dense { inp: b, out: hidden },
                LayerSpec::Relu,
                LayerSpec::Dense { inp: hidden, out: hidden },
                LayerSpec::Relu,
                LayerSpec::Dense { inp: hidden, out: FEATURE_CHANNELS },
                LayerSpec::UnitTanh,
            ],
            seed,
        )?;
        let dec = LayerStack::new(
            vec![
                LayerSpec::Dense { inp: FEATURE_CHANNELS + 3, out: hidden },
                LayerSpec::Relu,
                LayerSpec::Dense { inp: hidden, out: hidden },
                LayerSpec::Relu,
                LayerSpec::Dense { inp: hidden, out: b - 3 },
            ],
            seed.wrapping_add(1),
        )?;
        Ok(SpeuaeModel { enc, dec, ssf, lambda })
    }

    pub fn bands(&self) -> usize {
        self.ssf.bands()
    }

    pub fn lambda(&self) -> S {
        self.lambda
    }

    pub fn ssf(&self) -> &SpectralSensitivity<S> {
        &self.ssf
    }

    pub fn encoder(&self) -> &LayerStack<S> {
        &self.enc
    }

    pub fn decoder(&self) -> &LayerStack<S> {
        &self.dec
    }

    pub fn set_encoder_params(&mut self, p: &[S]) -> Result<()> {
        self.enc.set_params(p)
    }

    pub fn set_decoder_params(&mut self, p: &[S]) -> Result<()> {
        self.dec.set_params(p)
    }

    /// Compressed unobservable feature: 3 x ny x nx, one encoder application
    /// per pixel.
    pub fn encode(&self, hsi: &HyperCube<S>) -> Result<Tensor<S>> {
        if hsi.bands() != self.bands() {
            return Err(Error::Shape(format!(
                "cube has {} bands, model expects {}",
                hsi.bands(),
                self.bands()
            )));
        }
        Ok(self.enc.forward(&hsi.to_tensor())?.0)
    }

    /// Reconstruct a full cube from a feature map and its RGB image. The
    /// output is the pseudo-inverse lift of rgb plus a null-space field, so
    /// rendering it through the response returns rgb identically.
    pub fn decode(&self, feat: &Tensor<S>, rgb: &HyperCube<S>) -> Result<HyperCube<S>> {
        let (nhat, _, _) = self.decode_forward(feat, rgb)?;
        self.assemble(&nhat, rgb)
    }

    fn decode_forward(
        &self,
        feat: &Tensor<S>,
        rgb: &HyperCube<S>,
    ) -> Result<(Tensor<S>, nn::Tape<S>, Tensor<S>)> {
        let (fc, fh, fw) = feat.shape();
        if fc != FEATURE_CHANNELS {
            return Err(Error::Shape(format!("feature has {fc} channels, expected 3")));
        }
        if rgb.bands() != 3 || rgb.ny() != fh || rgb.nx() != fw {
            return Err(Error::Shape(format!(
                "rgb {}x{}x{} does not match feature 3x{fh}x{fw}",
                rgb.bands(),
                rgb.ny(),
                rgb.nx()
            )));
        }
        let mut data = Vec::with_capacity(6 * fh * fw);
        data.extend_from_slice(feat.data());
        data.extend_from_slice(rgb.data());
        let cat = Tensor::new(6, fh, fw, data)?;
        let (nhat, tape) = self.dec.forward(&cat)?;
        Ok((nhat, tape, cat))
    }

    fn assemble(&self, nhat: &Tensor<S>, rgb: &HyperCube<S>) -> Result<HyperCube<S>> {
        let npix = rgb.pixels();
        let mut data =
            spectral::lift_bands(rgb.data(), 3, npix, self.ssf.pinv_lift()?);
        let null = spectral::lift_bands(nhat.data(), self.bands() - 3, npix, self.ssf.v0()?);
        for (d, n) in data.iter_mut().zip(null) {
            *d += n;
        }
        HyperCube::new(self.ssf.wavelengths().to_vec(), rgb.nx(), rgb.ny(), data)
    }

    /// encode then decode in one call.
    pub fn reconstruct(&self, hsi: &HyperCube<S>, rgb: &HyperCube<S>) -> Result<HyperCube<S>> {
        let f = self.encode(hsi)?;
        self.decode(&f, rgb)
    }

    pub fn param_count(&self) -> usize {
        self.enc.param_count() + self.dec.param_count()
    }

    pub fn freeze(&mut self) {
        self.enc.freeze();
        self.dec.freeze();
    }

    pub fn is_frozen(&self) -> bool {
        self.enc.is_frozen() && self.dec.is_frozen()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let p = self.ssf.matrix();
        let extra = json!({
            "lambda": self.lambda.f64(),
            "wavelengths": self.ssf.wavelengths().iter().map(|v| v.f64()).collect::<Vec<f64>>(),
            "response": p.data().iter().map(|v| v.f64()).collect::<Vec<f64>>(),
        });
        nn::save_checkpoint(path, &[("enc", &self.enc), ("dec", &self.dec)], &extra)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let pathr = path.as_ref();
        let (stacks, extra) = nn::load_checkpoint::<S, _>(pathr)?;
        let mut enc = None;
        let mut dec = None;
        for (name, s) in stacks {
            match name.as_str() {
                "enc" => enc = Some(s),
                "dec" => dec = Some(s),
                other => {
                    return Err(Error::file_format(pathr, format!("unexpected stack '{other}'")))
                }
            }
        }
        let (enc, dec) = match (enc, dec) {
            (Some(e), Some(d)) => (e, d),
            _ => return Err(Error::file_format(pathr, "checkpoint is missing enc or dec")),
        };
        let bad = |what: &str| Error::file_format(pathr, format!("sidecar missing {what}"));
        let lambda = S::cst(extra["lambda"].as_f64().ok_or_else(|| bad("lambda"))?);
        let wl: Vec<S> = extra["wavelengths"]
            .as_array()
            .ok_or_else(|| bad("wavelengths"))?
            .iter()
            .map(|v| v.as_f64().map(S::cst).ok_or_else(|| bad("wavelengths")))
            .collect::<Result<_>>()?;
        let pdata: Vec<S> = extra["response"]
            .as_array()
            .ok_or_else(|| bad("response"))?
            .iter()
            .map(|v| v.as_f64().map(S::cst).ok_or_else(|| bad("response")))
            .collect::<Result<_>>()?;
        if pdata.len() != 3 * wl.len() {
            return Err(Error::file_format(pathr, "response length != 3 x wavelengths"));
        }
        let b = wl.len();
        let ssf = spectral::split_ssf(SpectralSensitivity::from_matrix(
            wl,
            Mat::from_vec(3, b, pdata),
        )?)?;
        Ok(SpeuaeModel { enc, dec, ssf, lambda })
    }
}

/// Everything stage-1 computes for one (hsi, rgb) sample.
#[derive(Debug, Clone)]
pub struct Stage1Eval<S> {
    pub total: S,
    pub hsi_re: S,
    pub align: S,
    pub grad_enc: Vec<S>,
    pub grad_dec: Vec<S>,
}

/// Loss only; see [`stage1_eval`] for the gradient-carrying form.
pub fn stage1_loss<S: Scalar>(
    hsi: &HyperCube<S>,
    rgb: &HyperCube<S>,
    model: &SpeuaeModel<S>,
    spaae: &SpaaeModel<S>,
) -> Result<(S, S, S)> {
    let e = stage1_eval(hsi, rgb, model, spaae)?;
    Ok((e.total, e.hsi_re, e.align))
}

/// Stage-1 objective and its gradient w.r.t. the model parameters.
///
/// total = MSE(hsi, decode(encode(hsi), rgb)) + lambda * MSE(f, codec(f))
/// where f = encode(hsi) and codec is the frozen spatial autoencoder. The
/// codec contributes input gradients only; its parameters are untouched, per
/// the frozen contract.
pub fn stage1_eval<S: Scalar>(
    hsi: &HyperCube<S>,
    rgb: &HyperCube<S>,
    model: &SpeuaeModel<S>,
    spaae: &SpaaeModel<S>,
) -> Result<Stage1Eval<S>> {
    if !spaae.is_frozen() {
        return Err(Error::Contract("stage-1 requires a frozen spatial codec".into()));
    }
    if hsi.bands() != model.bands() {
        return Err(Error::Shape(format!(
            "cube has {} bands, model expects {}",
            hsi.bands(),
            model.bands()
        )));
    }
    if rgb.bands() != 3 || rgb.nx() != hsi.nx() || rgb.ny() != hsi.ny() {
        return Err(Error::Shape("rgb does not match the cube's grid".into()));
    }
    let x = hsi.to_tensor();
    let (f, enc_tape) = model.enc.forward(&x)?;
    let (nhat, dec_tape, _cat) = model.decode_forward(&f, rgb)?;
    let recon = model.assemble(&nhat, rgb)?;

    // Reconstruction term and its gradient at the cube.
    let n_all = S::cst(recon.data().len() as f64);
    let two = S::cst(2.0);
    let mut hsi_re = S::zero();
    let mut g_recon = vec![S::zero(); recon.data().len()];
    for i in 0..recon.data().len() {
        let d = recon.data()[i] - hsi.data()[i];
        hsi_re += d * d;
        g_recon[i] = two * d / n_all;
    }
    hsi_re /= n_all;

    // Only the null-space lift depends on parameters; project the gradient
    // back onto the predicted null coordinates.
    let npix = hsi.pixels();
    let g_nhat = Tensor::new(
        model.bands() - 3,
        hsi.ny(),
        hsi.nx(),
        spectral::project_bands(&g_recon, model.bands(), npix, model.ssf.v0()?),
    )?;
    let (grad_dec, g_cat) = model.dec.backward(&dec_tape, &g_nhat)?;
    let mut g_f = Tensor::new(
        FEATURE_CHANNELS,
        hsi.ny(),
        hsi.nx(),
        g_cat.data()[..FEATURE_CHANNELS * npix].to_vec(),
    )?;

    // Alignment term through the frozen codec.
    let lambda = model.lambda;
    let mut align = S::zero();
    if lambda != S::zero() {
        let pass = spaae.roundtrip_forward(&f)?;
        let r = &pass.output;
        let n_f = S::cst(f.numel() as f64);
        let mut g_out = Tensor::zeros(FEATURE_CHANNELS, hsi.ny(), hsi.nx());
        for i in 0..f.numel() {
            let d = f.data()[i] - r.data()[i];
            align += d * d;
            // d align / d r, fed backwards through the codec.
            g_out.data_mut()[i] = -two * d / n_f;
        }
        align /= n_f;
        let g_through = spaae.roundtrip_backward(&pass, &g_out)?;
        for i in 0..f.numel() {
            let direct = -g_out.data()[i];
            g_f.data_mut()[i] += lambda * (direct + g_through.data()[i]);
        }
    } else {
        // Still report the alignment value for the curve.
        let r = spaae.roundtrip(&f)?;
        let n_f = S::cst(f.numel() as f64);
        for i in 0..f.numel() {
            let d = f.data()[i] - r.data()[i];
            align += d * d;
        }
        align /= n_f;
    }

    let (grad_enc, _) = model.enc.backward(&enc_tape, &g_f)?;
    let total = if lambda == S::zero() { hsi_re } else { hsi_re + lambda * align };
    Ok(Stage1Eval { total, hsi_re, align, grad_enc, grad_dec })
}

/// Stage-1 training loop: Adam over encoder and decoder, frozen codec, batch
/// gradients reduced in sample order. On a non-finite loss the last good
/// parameters are restored and a divergence error is returned.
pub fn train_stage1<S: Scalar>(
    data: &[(HyperCube<S>, HyperCube<S>)],
    model: &mut SpeuaeModel<S>,
    spaae: &SpaaeModel<S>,
    cfg: &Stage1Config,
) -> Result<Vec<Stage1Point>> {
    if data.is_empty() || cfg.batch == 0 || cfg.iters == 0 {
        return Err(Error::Config("stage-1 needs data and positive batch/iteration counts".into()));
    }
    if !spaae.is_frozen() {
        return Err(Error::Contract("stage-1 requires a frozen spatial codec".into()));
    }
    for (hsi, rgb) in data {
        if hsi.bands() != model.bands()
            || rgb.bands() != 3
            || rgb.nx() != hsi.nx()
            || rgb.ny() != hsi.ny()
        {
            return Err(Error::Shape("dataset sample does not match the model".into()));
        }
    }
    let enc_n = model.enc.param_count();
    let mut opt = Adam::new(S::cst(cfg.lr), model.param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut curve = Vec::new();
    for it in 0..cfg.iters {
        let batch: Vec<&(HyperCube<S>, HyperCube<S>)> =
            (0..cfg.batch).map(|_| &data[rng.gen_range(0..data.len())]).collect();
        let m = &*model;
        let (stats, grads) = nn::batch_mean_loss_and_grad(&batch, |(hsi, rgb)| {
            let e = stage1_eval(hsi, rgb, m, spaae).expect("shapes validated per batch");
            let mut g = e.grad_enc;
            g.extend(e.grad_dec);
            // Carry all three loss components through the ordered reduction.
            (Stat3 { total: e.total, re: e.hsi_re, align: e.align }, g)
        });
        if !stats.total.is_finite() {
            return Err(Error::Divergence(format!(
                "stage-1 loss became {} at iteration {it}",
                stats.total
            )));
        }
        opt.step_multi(
            &mut [model.enc.params_for_update()?, model.dec.params_for_update()?],
            &[&grads[..enc_n], &grads[enc_n..]],
        )?;
        if it % 10 == 0 || it + 1 == cfg.iters {
            curve.push(Stage1Point {
                iter: it,
                total: stats.total.f64(),
                hsi_re: stats.re.f64(),
                align: stats.align.f64(),
            });
        }
    }
    Ok(curve)
}

/// Three loss components that average like a scalar in the batch reduction.
#[derive(Debug, Clone, Copy)]
struct Stat3<S> {
    total: S,
    re: S,
    align: S,
}

impl<S: Scalar> std::ops::AddAssign for Stat3<S> {
    fn add_assign(&mut self, o: Self) {
        self.total += o.total;
        self.re += o.re;
        self.align += o.align;
    }
}

impl<S: Scalar> std::ops::DivAssign<S> for Stat3<S> {
    fn div_assign(&mut self, d: S) {
        self.total /= d;
        self.re /= d;
        self.align /= d;
    }
}
