//! Stage orchestration: spatial codec pretraining, spectral stage-1, then
//! conditional diffusion over codec latents, in that order. A trained
//! pipeline reconstructs cubes from RGB and plugs into relighting as a
//! spectral reconstructor.

use std::path::Path;

use crate::hsio::HyperCube;
use crate::nn::Tensor;
use crate::spaae::{pretrain_spaae, SpaaeConfig, SpaaeModel, LATENT_CHANNELS};
use crate::spectral::SpectralSensitivity;
use crate::speuae::{train_stage1, SpeuaeModel, Stage1Config, Stage1Point};
use crate::uldm::{
    infer_hsi, train_uldm, DenoiserModel, DiffusionSchedule, LatentNorm, TrainPoint, UldmConfig,
    UldmModel, DEFAULT_DDIM_STEPS, DEFAULT_T,
};
use crate::{Error, Result, Scalar};

/// Everything the three training stages need, plus inference defaults.
/// Stage seeds live inside the stage configs; `lambda` is the feature
/// alignment weight of stage 1.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub lambda: f64,
    pub hidden: usize,
    pub denoiser_width: usize,
    pub t_count: usize,
    pub ddim_steps: usize,
    pub num_samples: usize,
    /// Phase-A iterations denoising RGB latents unconditionally before the
    /// conditional phase; 0 skips the warm start.
    pub rgb_pretrain_iters: usize,
    pub spaae: SpaaeConfig,
    pub stage1: Stage1Config,
    pub uldm: UldmConfig,
}

impl PipelineConfig {
    /// Desk-scale budget: minutes, not hours, on a single machine.
    pub fn smoke(seed: u64) -> Self {
        PipelineConfig {
            lambda: 0.1,
            hidden: 48,
            denoiser_width: 16,
            t_count: DEFAULT_T,
            ddim_steps: DEFAULT_DDIM_STEPS,
            num_samples: 10,
            rgb_pretrain_iters: 300,
            spaae: SpaaeConfig {
                width: 24,
                iters: 500,
                batch: 8,
                lr: 2e-3,
                seed,
                holdout: 8,
                target_psnr: 28.0,
            },
            stage1: Stage1Config { iters: 500, batch: 8, lr: 4e-4, seed: seed.wrapping_add(1) },
            uldm: UldmConfig { iters: 1200, batch: 8, lr: 1e-3, seed: seed.wrapping_add(2) },
        }
    }
}

/// The three frozen stages.
pub struct TrainedPipeline<S> {
    pub spaae: SpaaeModel<S>,
    pub speuae: SpeuaeModel<S>,
    pub uldm: UldmModel<S>,
}

/// Loss curves from one full training run.
#[derive(Debug, Clone, Default)]
pub struct PipelineCurves {
    pub spaae: Vec<(usize, f64)>,
    pub stage1: Vec<Stage1Point>,
    pub uldm_pretrain: Vec<TrainPoint>,
    pub uldm: Vec<TrainPoint>,
}

/// Run all three stages on (cube, render) pairs. Order is fixed: the codec
/// first, the spectral stage against the frozen codec, then the denoiser on
/// codec latents of the spectral features.
pub fn train_full_pipeline<S: Scalar>(
    data: &[(HyperCube<S>, HyperCube<S>)],
    ssf: &SpectralSensitivity<S>,
    cfg: &PipelineConfig,
) -> Result<(TrainedPipeline<S>, PipelineCurves)> {
    if data.is_empty() {
        return Err(Error::Config("pipeline training needs data".into()));
    }
    let mut curves = PipelineCurves::default();

    let corpus: Vec<Tensor<S>> = data.iter().map(|(_, rgb)| rgb.to_tensor()).collect();
    let (spaae, spaae_curve) = pretrain_spaae(&corpus, &cfg.spaae)?;
    curves.spaae = spaae_curve;

    let mut speuae =
        SpeuaeModel::new(ssf.clone(), cfg.hidden, S::cst(cfg.lambda), cfg.stage1.seed)?;
    curves.stage1 = train_stage1(data, &mut speuae, &spaae, &cfg.stage1)?;
    speuae.freeze();

    let (uldm, pretrain_curve, cond_curve) = train_uldm_stage(data, &spaae, &speuae, cfg)?;
    curves.uldm_pretrain = pretrain_curve;
    curves.uldm = cond_curve;
    Ok((TrainedPipeline { spaae, speuae, uldm }, curves))
}

/// The diffusion stage alone, against already-frozen earlier stages: encode
/// the dataset to codec latents, fit the normalizers, optionally warm-start
/// unconditionally on render latents, then train conditionally. Returns the
/// assembled model plus the warm and conditional loss curves.
pub fn train_uldm_stage<S: Scalar>(
    data: &[(HyperCube<S>, HyperCube<S>)],
    spaae: &SpaaeModel<S>,
    speuae: &SpeuaeModel<S>,
    cfg: &PipelineConfig,
) -> Result<(UldmModel<S>, Vec<TrainPoint>, Vec<TrainPoint>)> {
    if data.is_empty() {
        return Err(Error::Config("diffusion training needs data".into()));
    }
    if !spaae.is_frozen() || !speuae.is_frozen() {
        return Err(Error::Contract("earlier stages must be frozen first".into()));
    }
    let z_rgb: Vec<Tensor<S>> =
        data.iter().map(|(_, rgb)| spaae.encode(&rgb.to_tensor())).collect::<Result<_>>()?;
    let z_un: Vec<Tensor<S>> = data
        .iter()
        .map(|(hsi, _)| spaae.encode(&speuae.encode(hsi)?))
        .collect::<Result<_>>()?;
    let norm_rgb = LatentNorm::fit(&z_rgb)?;
    let norm_un = LatentNorm::fit(&z_un)?;

    let mut denoiser =
        DenoiserModel::new(LATENT_CHANNELS, LATENT_CHANNELS, cfg.denoiser_width, cfg.uldm.seed)?;
    let schedule = DiffusionSchedule::new(cfg.t_count)?;
    let mut pretrain_curve = Vec::new();
    if cfg.rgb_pretrain_iters > 0 {
        // Warm start: learn to denoise the render latents with silent
        // conditioning, an unconditional phase before the conditional one.
        let warm: Vec<(Tensor<S>, Tensor<S>)> = z_rgb
            .iter()
            .map(|z| {
                let z = norm_rgb.apply(z)?;
                let (c, h, w) = z.shape();
                Ok((z, Tensor::zeros(c, h, w)))
            })
            .collect::<Result<_>>()?;
        let warm_cfg = UldmConfig {
            iters: cfg.rgb_pretrain_iters,
            seed: cfg.uldm.seed.wrapping_add(101),
            ..cfg.uldm.clone()
        };
        pretrain_curve = train_uldm(&warm, &mut denoiser, &schedule, &warm_cfg)?;
    }
    let pairs: Vec<(Tensor<S>, Tensor<S>)> = z_un
        .iter()
        .zip(&z_rgb)
        .map(|(zu, zr)| Ok((norm_un.apply(zu)?, norm_rgb.apply(zr)?)))
        .collect::<Result<_>>()?;
    let cond_curve = train_uldm(&pairs, &mut denoiser, &schedule, &cfg.uldm)?;
    denoiser.freeze();

    let uldm = UldmModel {
        denoiser,
        schedule,
        ddim_steps: cfg.ddim_steps,
        norm_un,
        norm_rgb,
    };
    Ok((uldm, pretrain_curve, cond_curve))
}

impl<S: Scalar> TrainedPipeline<S> {
    /// Sample-averaged reconstruction from an RGB cube.
    pub fn reconstruct(
        &self,
        rgb: &HyperCube<S>,
        num_samples: usize,
        seed: u64,
    ) -> Result<HyperCube<S>> {
        infer_hsi(rgb, &self.spaae, &self.speuae, &self.uldm, num_samples, seed)
    }

    /// Adapter for the relighting path: a reconstructor with frozen sampling
    /// settings.
    pub fn reconstructor(
        &self,
        num_samples: usize,
        seed: u64,
    ) -> impl Fn(&HyperCube<S>) -> Result<HyperCube<S>> + Sync + '_ {
        move |rgb: &HyperCube<S>| self.reconstruct(rgb, num_samples, seed)
    }

    /// Write the three stage checkpoints into a directory.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.spaae.save(dir.join("spaae.nnw"))?;
        self.speuae.save(dir.join("speuae.nnw"))?;
        self.uldm.save(dir.join("uldm.nnw"))?;
        Ok(())
    }

    /// Load the three stage checkpoints; models come back frozen, ready for
    /// inference only. A missing file is a dependency failure: some earlier
    /// stage has not been trained.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut spaae = SpaaeModel::load(require_checkpoint(dir, "spaae.nnw")?)?;
        let mut speuae = SpeuaeModel::load(require_checkpoint(dir, "speuae.nnw")?)?;
        let mut uldm = UldmModel::load(require_checkpoint(dir, "uldm.nnw")?)?;
        spaae.freeze();
        speuae.freeze();
        uldm.denoiser.freeze();
        Ok(TrainedPipeline { spaae, speuae, uldm })
    }
}

/// Path of a stage checkpoint, or a dependency error naming what is missing.
pub fn require_checkpoint(dir: &Path, name: &str) -> Result<std::path::PathBuf> {
    let p = dir.join(name);
    if p.is_file() {
        Ok(p)
    } else {
        Err(Error::Dependency(format!(
            "checkpoint {} not found; train the earlier stages first",
            p.display()
        )))
    }
}
