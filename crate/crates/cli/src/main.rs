//! Command-line front end: data prep, the three training stages, inference,
//! relighting, and the invariant suites, with stable exit codes (0 ok,
//! 2 input/format, 3 missing dependency, 4 domain failure). Every command is
//! deterministic for a fixed seed and writes byte-identical artifacts on
//! re-runs.

mod config;
mod dataset;
mod suite;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::RunConfig;
use unobs_core::hsio::{load_hsi, load_illuminant_csv, load_ssf_csv, save_hsi, synthesize_rgb};
use unobs_core::pipeline::{require_checkpoint, train_uldm_stage, TrainedPipeline};
use unobs_core::relight::{gray_world, perfect_reflector, relight_hsi, rgb_re, RelightJob};
use unobs_core::spaae::{pretrain_spaae, SpaaeModel};
use unobs_core::speuae::{train_stage1, SpeuaeModel};
use unobs_core::{benchmark, metrics, Error, Result};

#[derive(Parser)]
#[command(name = "unobs", version, about = "Spectral reconstruction and relighting toolkit")]
struct Cli {
    /// Cap the worker thread count; 1 gives a fully serial run.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a hyperspectral cube to RGB through a camera response.
    Hsi2rgb(Hsi2rgbArgs),
    /// Generate the synthetic benchmark dataset onto disk.
    SynthData(ConfigArg),
    /// Train one pipeline stage; earlier stages must already have checkpoints.
    Train(TrainArgs),
    /// Reconstruct a hyperspectral cube from an RGB input.
    Reconstruct(ReconstructArgs),
    /// Re-render an RGB image under a different illuminant.
    Relight(RelightArgs),
    /// Run one invariant suite and emit a JSON report.
    OracleCheck(OracleCheckArgs),
}

#[derive(Args)]
struct Hsi2rgbArgs {
    #[arg(long)]
    hsi: PathBuf,
    #[arg(long)]
    ssf: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArg {
    /// key = value file; omits fall back to schema defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    stage: Stage,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    Spaae,
    Speuae,
    Uldm,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    rgb: PathBuf,
    #[arg(long, default_value = "ckpt")]
    ckpt_dir: PathBuf,
    #[arg(long, default_value_t = 10)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth cube; when given, an eval CSV is written next to --out.
    #[arg(long)]
    r#ref: Option<PathBuf>,
}

#[derive(Args)]
struct RelightArgs {
    #[arg(long)]
    rgb: PathBuf,
    /// Source illuminant CSV (spectral methods only).
    #[arg(long)]
    illum: Option<PathBuf>,
    /// Target illuminant CSV (spectral methods only).
    #[arg(long)]
    target_illum: Option<PathBuf>,
    #[arg(long)]
    ssf: Option<PathBuf>,
    #[arg(long, value_enum)]
    method: Method,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    ckpt_dir: Option<PathBuf>,
    /// Ground-truth cube standing in for the reconstructor (method oracle).
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Uldm,
    RgbRe,
    Gw,
    Pr,
    Oracle,
}

#[derive(Args)]
struct OracleCheckArgs {
    #[arg(long, value_enum)]
    suite: Suite,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Ssf,
    Manifold,
    Posterior,
    Metrics,
}

impl Suite {
    fn name(self) -> &'static str {
        match self {
            Suite::Ssf => "ssf",
            Suite::Manifold => "manifold",
            Suite::Posterior => "posterior",
            Suite::Metrics => "metrics",
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: could not configure the thread pool: {e}");
            std::process::exit(2);
        }
    }
    match run(cli.cmd) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.class().exit_code());
        }
    }
}

fn run(cmd: Cmd) -> Result<i32> {
    match cmd {
        Cmd::Hsi2rgb(a) => cmd_hsi2rgb(&a)?,
        Cmd::SynthData(a) => cmd_synth_data(&load_config(a.config.as_deref())?)?,
        Cmd::Train(a) => cmd_train(a.stage, &load_config(a.config.as_deref())?)?,
        Cmd::Reconstruct(a) => cmd_reconstruct(&a)?,
        Cmd::Relight(a) => cmd_relight(&a)?,
        Cmd::OracleCheck(a) => return cmd_oracle_check(a.suite, a.seed),
    }
    Ok(0)
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => RunConfig::from_defaults(),
    }
}

fn cmd_hsi2rgb(a: &Hsi2rgbArgs) -> Result<()> {
    let cube = load_hsi::<f64>(&a.hsi)?;
    let ssf = load_ssf_csv(&a.ssf)?;
    let rgb = synthesize_rgb(&cube, &ssf)?;
    save_hsi(&rgb, &a.out)?;
    dataset::write_png(&a.out.with_extension("png"), &rgb)?;
    println!("rendered {}x{} pixels to {}", rgb.nx(), rgb.ny(), a.out.display());
    Ok(())
}

fn cmd_synth_data(cfg: &RunConfig) -> Result<()> {
    let bench = benchmark::generate::<f64>(&cfg.mixture_spec())?;
    dataset::write_dataset(&bench, &cfg.data_dir)?;
    println!(
        "wrote {} train and {} test cubes plus ssf.csv under {}",
        bench.train.len(),
        bench.test.len(),
        cfg.data_dir.display()
    );
    Ok(())
}

fn load_frozen_spaae(dir: &Path) -> Result<SpaaeModel<f64>> {
    let mut m = SpaaeModel::load(require_checkpoint(dir, "spaae.nnw")?)?;
    m.freeze();
    Ok(m)
}

fn load_frozen_speuae(dir: &Path) -> Result<SpeuaeModel<f64>> {
    let mut m = SpeuaeModel::load(require_checkpoint(dir, "speuae.nnw")?)?;
    m.freeze();
    Ok(m)
}

fn cmd_train(stage: Stage, cfg: &RunConfig) -> Result<()> {
    let (ssf, raw) = dataset::load_split(&cfg.data_dir, "train")?;
    let data = dataset::patchify(raw, &ssf, cfg.patch_size, cfg.patch_stride)?;
    let pc = cfg.pipeline_config();
    std::fs::create_dir_all(&cfg.ckpt_dir).map_err(|e| Error::io(&cfg.ckpt_dir, e))?;
    match stage {
        Stage::Spaae => {
            let corpus: Vec<_> = data.iter().map(|(_, rgb)| rgb.to_tensor()).collect();
            let (model, curve) = pretrain_spaae(&corpus, &pc.spaae)?;
            model.save(cfg.ckpt_dir.join("spaae.nnw"))?;
            dataset::write_curve_csv(&cfg.ckpt_dir.join("spaae_loss.csv"), "iter,loss", &curve)?;
            println!(
                "stage spaae done: {} iterations on {} tiles, checkpoint at {}",
                pc.spaae.iters,
                data.len(),
                cfg.ckpt_dir.join("spaae.nnw").display()
            );
        }
        Stage::Speuae => {
            let spaae = load_frozen_spaae(&cfg.ckpt_dir)?;
            let mut model = SpeuaeModel::new(ssf.clone(), pc.hidden, pc.lambda, pc.stage1.seed)?;
            let curve = train_stage1(&data, &mut model, &spaae, &pc.stage1)?;
            model.freeze();
            model.save(cfg.ckpt_dir.join("speuae.nnw"))?;
            let mut out = String::from("iter,total,hsi_re,align\n");
            for p in &curve {
                out.push_str(&format!("{},{},{},{}\n", p.iter, p.total, p.hsi_re, p.align));
            }
            let path = cfg.ckpt_dir.join("speuae_loss.csv");
            std::fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
            println!(
                "stage speuae done: {} iterations, checkpoint at {}",
                pc.stage1.iters,
                cfg.ckpt_dir.join("speuae.nnw").display()
            );
        }
        Stage::Uldm => {
            let spaae = load_frozen_spaae(&cfg.ckpt_dir)?;
            let speuae = load_frozen_speuae(&cfg.ckpt_dir)?;
            let (model, warm, cond) = train_uldm_stage(&data, &spaae, &speuae, &pc)?;
            model.save(cfg.ckpt_dir.join("uldm.nnw"))?;
            let mut out = String::from("phase,iter,loss\n");
            for p in &warm {
                out.push_str(&format!("warm,{},{}\n", p.iter, p.loss));
            }
            for p in &cond {
                out.push_str(&format!("cond,{},{}\n", p.iter, p.loss));
            }
            let path = cfg.ckpt_dir.join("uldm_loss.csv");
            std::fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
            println!(
                "stage uldm done: {} warm + {} conditional iterations, checkpoint at {}",
                pc.rgb_pretrain_iters,
                pc.uldm.iters,
                cfg.ckpt_dir.join("uldm.nnw").display()
            );
        }
    }
    Ok(())
}

fn cmd_reconstruct(a: &ReconstructArgs) -> Result<()> {
    let rgb = load_hsi::<f64>(&a.rgb)?;
    let pipe = TrainedPipeline::<f64>::load_dir(&a.ckpt_dir)?;
    let est = pipe.reconstruct(&rgb, a.samples, a.seed)?.clamped_unit();
    save_hsi(&est, &a.out)?;
    println!("reconstructed {} bands at {}x{} to {}", est.bands(), est.nx(), est.ny(), a.out.display());
    if let Some(ref_path) = &a.r#ref {
        let truth = load_hsi::<f64>(ref_path)?;
        let rep = metrics::evaluate(&est, &truth)?;
        let path = a.out.with_extension("eval.csv");
        let row = format!(
            "image,psnr,ssim,sam\n{},{},{},{}\n",
            a.out.display(),
            rep.psnr,
            rep.ssim,
            rep.sam_degrees
        );
        std::fs::write(&path, row).map_err(|e| Error::io(&path, e))?;
        println!(
            "psnr {:.4} dB, ssim {:.6}, sam {:.6} deg ({} pixels excluded) -> {}",
            rep.psnr,
            rep.ssim,
            rep.sam_degrees,
            rep.sam_excluded,
            path.display()
        );
    }
    Ok(())
}

/// The illuminant pair plus camera shared by every spectral relight method.
fn load_illum_trio(
    a: &RelightArgs,
) -> Result<(
    unobs_core::hsio::Illuminant<f64>,
    unobs_core::hsio::Illuminant<f64>,
    unobs_core::spectral::SpectralSensitivity<f64>,
)> {
    let need = |opt: &Option<PathBuf>, flag: &str| {
        opt.clone()
            .ok_or_else(|| Error::Config(format!("{flag} is required for this relight method")))
    };
    let source = load_illuminant_csv(need(&a.illum, "--illum")?)?;
    let target = load_illuminant_csv(need(&a.target_illum, "--target-illum")?)?;
    let ssf = load_ssf_csv(need(&a.ssf, "--ssf")?)?;
    Ok((source, target, ssf))
}

fn cmd_relight(a: &RelightArgs) -> Result<()> {
    let rgb = load_hsi::<f64>(&a.rgb)?;
    let relit = match a.method {
        Method::Gw => gray_world(&rgb)?,
        Method::Pr => perfect_reflector(&rgb)?,
        Method::RgbRe => {
            let (source, target, ssf) = load_illum_trio(a)?;
            rgb_re(&rgb, &source, &target, &ssf)?
        }
        Method::Uldm | Method::Oracle => {
            let (source, target, ssf) = load_illum_trio(a)?;
            let sr_cube = match a.method {
                Method::Uldm => {
                    let dir = a.ckpt_dir.as_ref().ok_or_else(|| {
                        Error::Config("--ckpt-dir is required for method uldm".into())
                    })?;
                    let pipe = TrainedPipeline::<f64>::load_dir(dir)?;
                    pipe.reconstruct(&rgb, a.samples, a.seed)?
                }
                _ => {
                    let tp = a.truth.as_ref().ok_or_else(|| {
                        Error::Config("--truth is required for method oracle".into())
                    })?;
                    load_hsi::<f64>(tp)?
                }
            };
            let sr_path = sibling(&a.out, "_sr.hsc1");
            save_hsi(&sr_cube.clamped_unit(), &sr_path)?;
            let sr = |_: &unobs_core::hsio::HyperCube<f64>| Ok(sr_cube.clone());
            let job = RelightJob::new(&rgb, &source, &target, &ssf, &sr);
            relight_hsi(&job)?
        }
    };
    let relit = relit.clamped_unit();
    save_hsi(&relit, &a.out)?;
    dataset::write_png(&a.out.with_extension("png"), &relit)?;
    println!("relit image written to {}", a.out.display());
    Ok(())
}

/// `out.hsc1` -> `out<suffix>` in the same directory.
fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    out.with_file_name(format!("{stem}{suffix}"))
}

fn cmd_oracle_check(suite: Suite, seed: u64) -> Result<i32> {
    let checks = match suite {
        Suite::Ssf => suite::ssf_suite(seed)?,
        Suite::Manifold => suite::manifold_suite(seed)?,
        Suite::Posterior => suite::posterior_suite(seed)?,
        Suite::Metrics => suite::metrics_suite(seed)?,
    };
    let report = serde_json::json!({
        "suite": suite.name(),
        "checks": checks
            .iter()
            .map(|c| {
                serde_json::json!({
                    "name": c.name,
                    "pass": c.pass,
                    "value": c.value,
                    "tol": c.tol,
                })
            })
            .collect::<Vec<_>>(),
    });
    println!(
        "{}",
        serde_json::to_string_pretty(&report)
            .map_err(|e| Error::Data(format!("report serialization failed: {e}")))?
    );
    Ok(if checks.iter().all(|c| c.pass) { 0 } else { 4 })
}
