//! Frozen spatial autoencoder: a small convolutional codec that maps any
//! 3-channel image to a compact latent (C_lat channels at 1/f resolution)
//! and back. It is pretrained once on RGB renders, then frozen; the rest of
//! the pipeline treats it as a fixed embedding shared by RGB images and
//! compressed spectral features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use std::path::Path;

use crate::nn::{self, Adam, LayerSpec, LayerStack, Tensor};
use crate::{Error, Result, Scalar};

/// Spatial downsampling factor of the codec.
pub const DOWNSAMPLE: usize = 4;
/// Latent channel count.
pub const LATENT_CHANNELS: usize = 4;

/// Convolutional encoder/decoder pair. Freezing propagates to both stacks.
#[derive(Debug, Clone)]
pub struct SpaaeModel<S> {
    enc: LayerStack<S>,
    dec: LayerStack<S>,
}

/// Saved activations from one encode-decode pass.
#[derive(Debug, Clone)]
pub struct RoundtripPass<S> {
    pub output: Tensor<S>,
    enc_tape: nn::Tape<S>,
    dec_tape: nn::Tape<S>,
}

/// Pretraining knobs. `target_psnr` is the acceptance threshold on held-out
/// reconstructions; missing it fails the run rather than shipping a weak
/// codec.
#[derive(Debug, Clone)]
pub struct SpaaeConfig {
    pub width: usize,
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub holdout: usize,
    pub target_psnr: f64,
}

impl Default for SpaaeConfig {
    fn default() -> Self {
        SpaaeConfig {
            width: 24,
            iters: 400,
            batch: 8,
            lr: 2e-3,
            seed: 0,
            holdout: 8,
            target_psnr: 35.0,
        }
    }
}

impl<S: Scalar> SpaaeModel<S> {
    /// Fresh model: two stride-2 convs down, two nearest-neighbor doublings
    /// up, `width` channels in the trunk.
    pub fn new(width: usize, seed: u64) -> Result<Self> {
        let enc = LayerStack::new(
            vec![
                LayerSpec::Conv { c_in: 3, c_out: width, stride: 2 },
                LayerSpec::Relu,
                LayerSpec::Conv { c_in: width, c_out: width, stride: 1 },
                LayerSpec::Relu,
                LayerSpec::Conv { c_in: width, c_out: LATENT_CHANNELS, stride: 2 },
            ],
            seed,
        )?;
        let dec = LayerStack::new(
            vec![
                LayerSpec::Conv { c_in: LATENT_CHANNELS, c_out: width, stride: 1 },
                LayerSpec::Relu,
                LayerSpec::Upsample2x,
                LayerSpec::Conv { c_in: width, c_out: width, stride: 1 },
                LayerSpec::Relu,
                LayerSpec::Upsample2x,
                LayerSpec::Conv { c_in: width, c_out: width, stride: 1 },
                LayerSpec::Relu,
                LayerSpec::Conv { c_in: width, c_out: 3, stride: 1 },
            ],
            seed.wrapping_add(1),
        )?;
        Ok(SpaaeModel { enc, dec })
    }

    pub fn from_stacks(enc: LayerStack<S>, dec: LayerStack<S>) -> Result<Self> {
        let (lc, _, _) = enc.output_shape((3, DOWNSAMPLE, DOWNSAMPLE))?;
        if lc != LATENT_CHANNELS {
            return Err(Error::Shape(format!(
                "encoder emits {lc} channels, expected {LATENT_CHANNELS}"
            )));
        }
        Ok(SpaaeModel { enc, dec })
    }

    pub fn encoder(&self) -> &LayerStack<S> {
        &self.enc
    }

    pub fn decoder(&self) -> &LayerStack<S> {
        &self.dec
    }

    pub fn is_frozen(&self) -> bool {
        self.enc.is_frozen() && self.dec.is_frozen()
    }

    pub fn freeze(&mut self) {
        self.enc.freeze();
        self.dec.freeze();
    }

    fn check_input(&self, img: &Tensor<S>) -> Result<()> {
        let (c, h, w) = img.shape();
        if c != 3 {
            return Err(Error::Shape(format!("spatial codec expects 3 channels, got {c}")));
        }
        if h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
            return Err(Error::Shape(format!(
                "spatial dims {h}x{w} not divisible by {DOWNSAMPLE}; refusing to pad"
            )));
        }
        Ok(())
    }

    /// Latent code of a 3-channel image: (C_lat, h/f, w/f).
    pub fn encode(&self, img: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_input(img)?;
        Ok(self.enc.forward(img)?.0)
    }

    pub fn decode(&self, z: &Tensor<S>) -> Result<Tensor<S>> {
        let (c, _, _) = z.shape();
        if c != LATENT_CHANNELS {
            return Err(Error::Shape(format!(
                "latent has {c} channels, expected {LATENT_CHANNELS}"
            )));
        }
        Ok(self.dec.forward(z)?.0)
    }

    pub fn roundtrip(&self, img: &Tensor<S>) -> Result<Tensor<S>> {
        self.decode(&self.encode(img)?)
    }

    /// Forward pass through encode then decode, keeping the tapes so the
    /// caller can differentiate through the frozen codec afterwards.
    pub fn roundtrip_forward(&self, img: &Tensor<S>) -> Result<RoundtripPass<S>> {
        self.check_input(img)?;
        let (z, enc_tape) = self.enc.forward(img)?;
        let (output, dec_tape) = self.dec.forward(&z)?;
        Ok(RoundtripPass { output, enc_tape, dec_tape })
    }

    /// Gradient of a scalar loss w.r.t. the codec *input*, given the loss
    /// gradient at the roundtrip output. Parameter gradients are computed
    /// and discarded; this is the only backward path a frozen codec exposes,
    /// and it is what the stage-1 alignment loss differentiates through.
    pub fn roundtrip_backward(
        &self,
        pass: &RoundtripPass<S>,
        grad_out: &Tensor<S>,
    ) -> Result<Tensor<S>> {
        let (_, gz) = self.dec.backward(&pass.dec_tape, grad_out)?;
        let (_, gin) = self.enc.backward(&pass.enc_tape, &gz)?;
        Ok(gin)
    }

    /// Convenience wrapper combining [`roundtrip_forward`] and
    /// [`roundtrip_backward`].
    pub fn roundtrip_input_gradient(
        &self,
        img: &Tensor<S>,
        grad_out: &Tensor<S>,
    ) -> Result<(Tensor<S>, Tensor<S>)> {
        let pass = self.roundtrip_forward(img)?;
        let gin = self.roundtrip_backward(&pass, grad_out)?;
        Ok((pass.output, gin))
    }

    /// Fingerprint of all parameters; used to assert frozen immutability.
    pub fn param_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for p in self.enc.params().iter().chain(self.dec.params()) {
            for b in p.f64().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        nn::save_checkpoint(path, &[("enc", &self.enc), ("dec", &self.dec)], &json!({}))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let p = path.as_ref();
        let (stacks, _) = nn::load_checkpoint::<S, _>(p)?;
        let mut enc = None;
        let mut dec = None;
        for (name, s) in stacks {
            match name.as_str() {
                "enc" => enc = Some(s),
                "dec" => dec = Some(s),
                other => {
                    return Err(Error::file_format(p, format!("unexpected stack '{other}'")))
                }
            }
        }
        match (enc, dec) {
            (Some(e), Some(d)) => SpaaeModel::from_stacks(e, d),
            _ => Err(Error::file_format(p, "checkpoint is missing enc or dec")),
        }
    }
}

fn mse_and_grad<S: Scalar>(out: &Tensor<S>, target: &Tensor<S>) -> (S, Tensor<S>) {
    let n = S::cst(out.numel() as f64);
    let mut loss = S::zero();
    let mut g = Tensor::zeros(out.c(), out.h(), out.w());
    let two = S::cst(2.0);
    for i in 0..out.numel() {
        let d = out.data()[i] - target.data()[i];
        loss += d * d;
        g.data_mut()[i] = two * d / n;
    }
    (loss / n, g)
}

/// Train the codec on 3-channel images by plain reconstruction MSE, hold out
/// the last `holdout` images for validation, then freeze. Fails if held-out
/// PSNR misses `target_psnr`.
pub fn pretrain_spaae<S: Scalar>(
    corpus: &[Tensor<S>],
    cfg: &SpaaeConfig,
) -> Result<(SpaaeModel<S>, Vec<(usize, f64)>)> {
    for img in corpus {
        if img.c() != 3 {
            return Err(Error::Shape("pretraining corpus must be 3-channel images".into()));
        }
    }
    if corpus.len() <= cfg.holdout {
        return Err(Error::Config(format!(
            "corpus of {} images cannot spare {} for holdout",
            corpus.len(),
            cfg.holdout
        )));
    }
    let (train, held) = corpus.split_at(corpus.len() - cfg.holdout);
    let mut model = SpaaeModel::<S>::new(cfg.width, cfg.seed)?;
    let nparams = model.enc.param_count() + model.dec.param_count();
    let mut opt = Adam::new(S::cst(cfg.lr), nparams);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut curve = Vec::new();
    for it in 0..cfg.iters {
        let batch: Vec<&Tensor<S>> =
            (0..cfg.batch).map(|_| &train[rng.gen_range(0..train.len())]).collect();
        let enc = &model.enc;
        let dec = &model.dec;
        let (loss, grads) = nn::batch_mean_loss_and_grad(&batch, |img| {
            let (z, enc_tape) = enc.forward(img).expect("validated shapes");
            let (out, dec_tape) = dec.forward(&z).expect("validated shapes");
            let (l, gout) = mse_and_grad(&out, img);
            let (dec_g, gz) = dec.backward(&dec_tape, &gout).expect("fresh tape");
            let (enc_g, _) = enc.backward(&enc_tape, &gz).expect("fresh tape");
            let mut g = enc_g;
            g.extend(dec_g);
            (l, g)
        });
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("pretraining loss became {loss} at {it}")));
        }
        let split = model.enc.param_count();
        opt.step_multi(
            &mut [model.enc.params_for_update()?, model.dec.params_for_update()?],
            &[&grads[..split], &grads[split..]],
        )?;
        if it % 10 == 0 || it + 1 == cfg.iters {
            curve.push((it, loss.f64()));
        }
    }
    model.freeze();
    let psnr = holdout_psnr(&model, held)?;
    if psnr < cfg.target_psnr {
        return Err(Error::Contract(format!(
            "held-out reconstruction PSNR {psnr:.2} dB below the {:.2} dB threshold",
            cfg.target_psnr
        )));
    }
    Ok((model, curve))
}

/// Mean reconstruction PSNR over a held-out set (peak 1).
pub fn holdout_psnr<S: Scalar>(model: &SpaaeModel<S>, held: &[Tensor<S>]) -> Result<f64> {
    if held.is_empty() {
        return Err(Error::Config("empty holdout set".into()));
    }
    let mut acc = 0.0;
    for img in held {
        let out = model.roundtrip(img)?;
        let (l, _) = mse_and_grad(&out, img);
        let l = l.f64();
        acc += if l == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / l).log10() };
    }
    Ok(acc / held.len() as f64)
}
