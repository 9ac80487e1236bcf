//! Flat key=value run configuration. One `key = value` per line, `#` starts
//! a comment, every key is checked against the schema below and unknown keys
//! are rejected so typos cannot silently fall back to defaults.

use std::path::{Path, PathBuf};

use unobs_core::benchmark::MixtureSpec;
use unobs_core::pipeline::PipelineConfig;
use unobs_core::spaae::{self, SpaaeConfig};
use unobs_core::speuae::Stage1Config;
use unobs_core::uldm::UldmConfig;
use unobs_core::{Error, Result};

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub ckpt_dir: PathBuf,
    pub seed: u64,
    pub lambda: f64,
    pub t: usize,
    pub ddim_steps: usize,
    pub num_samples: usize,
    pub patch_size: usize,
    pub patch_stride: usize,
    /// Spatial downsampling factor of the codec; must match the compiled
    /// architecture.
    pub f: usize,
    /// Codec latent channels; must match the compiled architecture.
    pub c_lat: usize,
    pub spaae_width: usize,
    pub hidden: usize,
    pub denoiser_width: usize,
    pub spaae_iters: usize,
    pub stage1_iters: usize,
    pub uldm_iters: usize,
    pub rgb_pretrain_iters: usize,
    pub spaae_lr: f64,
    pub stage1_lr: f64,
    pub uldm_lr: f64,
    pub batch: usize,
    pub spaae_holdout: usize,
    pub spaae_target_psnr: f64,
    pub train_count: usize,
    pub test_count: usize,
    pub nx: usize,
    pub ny: usize,
    pub manifold_dims: Vec<usize>,
}

fn default_data_dir() -> PathBuf {
    std::env::var_os("UNOBS_DATA_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data"))
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_dir: default_data_dir(),
            ckpt_dir: PathBuf::from("ckpt"),
            seed: 0,
            lambda: 0.1,
            t: 1000,
            ddim_steps: 20,
            num_samples: 10,
            patch_size: 128,
            patch_stride: 64,
            f: spaae::DOWNSAMPLE,
            c_lat: spaae::LATENT_CHANNELS,
            spaae_width: 24,
            hidden: 48,
            denoiser_width: 16,
            spaae_iters: 500,
            stage1_iters: 500,
            uldm_iters: 1200,
            rgb_pretrain_iters: 300,
            spaae_lr: 2e-3,
            stage1_lr: 4e-4,
            uldm_lr: 1.5e-5,
            batch: 8,
            spaae_holdout: 8,
            spaae_target_psnr: 28.0,
            train_count: 200,
            test_count: 20,
            nx: 64,
            ny: 64,
            manifold_dims: vec![3, 4, 5, 6],
        }
    }
}

fn parse_usize(key: &str, val: &str) -> Result<usize> {
    val.parse()
        .map_err(|_| Error::Config(format!("key {key}: expected a non-negative integer, got {val:?}")))
}

fn parse_u64(key: &str, val: &str) -> Result<u64> {
    val.parse()
        .map_err(|_| Error::Config(format!("key {key}: expected a non-negative integer, got {val:?}")))
}

fn parse_f64(key: &str, val: &str) -> Result<f64> {
    let v: f64 = val
        .parse()
        .map_err(|_| Error::Config(format!("key {key}: expected a number, got {val:?}")))?;
    if !v.is_finite() {
        return Err(Error::Config(format!("key {key}: value must be finite, got {val:?}")));
    }
    Ok(v)
}

fn parse_dims(key: &str, val: &str) -> Result<Vec<usize>> {
    let dims: Vec<usize> = val
        .split(',')
        .map(|s| parse_usize(key, s.trim()))
        .collect::<Result<_>>()?;
    if dims.is_empty() || dims.iter().any(|&d| d == 0) {
        return Err(Error::Config(format!("key {key}: expected positive integers, got {val:?}")));
    }
    Ok(dims)
}

impl RunConfig {
    /// Defaults only, still schema-validated (the env data root could be
    /// anything).
    pub fn from_defaults() -> Result<Self> {
        let cfg = RunConfig::default();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, val) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected key = value", path.display(), idx + 1))
            })?;
            cfg.set(key.trim(), val.trim()).map_err(|e| {
                Error::Config(format!("{}:{}: {e}", path.display(), idx + 1))
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, val: &str) -> Result<()> {
        match key {
            "data_dir" => self.data_dir = PathBuf::from(val),
            "ckpt_dir" => self.ckpt_dir = PathBuf::from(val),
            "seed" => self.seed = parse_u64(key, val)?,
            "lambda" => self.lambda = parse_f64(key, val)?,
            "t" => self.t = parse_usize(key, val)?,
            "ddim_steps" => self.ddim_steps = parse_usize(key, val)?,
            "num_samples" => self.num_samples = parse_usize(key, val)?,
            "patch_size" => self.patch_size = parse_usize(key, val)?,
            "patch_stride" => self.patch_stride = parse_usize(key, val)?,
            "f" => self.f = parse_usize(key, val)?,
            "c_lat" => self.c_lat = parse_usize(key, val)?,
            "spaae_width" => self.spaae_width = parse_usize(key, val)?,
            "hidden" => self.hidden = parse_usize(key, val)?,
            "denoiser_width" => self.denoiser_width = parse_usize(key, val)?,
            "spaae_iters" => self.spaae_iters = parse_usize(key, val)?,
            "stage1_iters" => self.stage1_iters = parse_usize(key, val)?,
            "uldm_iters" => self.uldm_iters = parse_usize(key, val)?,
            "rgb_pretrain_iters" => self.rgb_pretrain_iters = parse_usize(key, val)?,
            "spaae_lr" => self.spaae_lr = parse_f64(key, val)?,
            "stage1_lr" => self.stage1_lr = parse_f64(key, val)?,
            "uldm_lr" => self.uldm_lr = parse_f64(key, val)?,
            "batch" => self.batch = parse_usize(key, val)?,
            "spaae_holdout" => self.spaae_holdout = parse_usize(key, val)?,
            "spaae_target_psnr" => self.spaae_target_psnr = parse_f64(key, val)?,
            "train_count" => self.train_count = parse_usize(key, val)?,
            "test_count" => self.test_count = parse_usize(key, val)?,
            "nx" => self.nx = parse_usize(key, val)?,
            "ny" => self.ny = parse_usize(key, val)?,
            "manifold_dims" => self.manifold_dims = parse_dims(key, val)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.f != spaae::DOWNSAMPLE {
            return Err(Error::Config(format!(
                "f = {} but the codec is compiled for a factor of {}",
                self.f,
                spaae::DOWNSAMPLE
            )));
        }
        if self.c_lat != spaae::LATENT_CHANNELS {
            return Err(Error::Config(format!(
                "c_lat = {} but the codec is compiled for {} latent channels",
                self.c_lat,
                spaae::LATENT_CHANNELS
            )));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if self.t == 0 || self.ddim_steps == 0 || self.ddim_steps > self.t {
            return Err(Error::Config(format!(
                "need 0 < ddim_steps <= t, got ddim_steps = {} with t = {}",
                self.ddim_steps, self.t
            )));
        }
        if self.num_samples == 0 {
            return Err(Error::Config("num_samples must be positive".into()));
        }
        if self.patch_size == 0 || self.patch_stride == 0 {
            return Err(Error::Config("patch size and stride must be positive".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if self.spaae_width == 0 || self.hidden == 0 || self.denoiser_width == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.manifold_dims.is_empty() {
            return Err(Error::Config("manifold_dims must not be empty".into()));
        }
        Ok(())
    }

    /// Stage seeds are derived from the run seed the same way everywhere, so
    /// two commands over the same config train identical models.
    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            lambda: self.lambda,
            hidden: self.hidden,
            denoiser_width: self.denoiser_width,
            t_count: self.t,
            ddim_steps: self.ddim_steps,
            num_samples: self.num_samples,
            rgb_pretrain_iters: self.rgb_pretrain_iters,
            spaae: SpaaeConfig {
                width: self.spaae_width,
                iters: self.spaae_iters,
                batch: self.batch,
                lr: self.spaae_lr,
                seed: self.seed,
                holdout: self.spaae_holdout,
                target_psnr: self.spaae_target_psnr,
            },
            stage1: Stage1Config {
                iters: self.stage1_iters,
                batch: self.batch,
                lr: self.stage1_lr,
                seed: self.seed.wrapping_add(1),
            },
            uldm: UldmConfig {
                iters: self.uldm_iters,
                batch: self.batch,
                lr: self.uldm_lr,
                seed: self.seed.wrapping_add(2),
            },
        }
    }

    pub fn mixture_spec(&self) -> MixtureSpec {
        MixtureSpec {
            nx: self.nx,
            ny: self.ny,
            dims: self.manifold_dims.clone(),
            train: self.train_count,
            test: self.test_count,
            seed: self.seed,
        }
    }
}
