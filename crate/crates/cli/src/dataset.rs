//! On-disk dataset layout shared by data prep and training: the camera
//! response lives at `<data_dir>/ssf.csv`, ground-truth cubes as numbered
//! HSC1 files under `train/` and `test/`. RGB inputs are re-rendered from
//! the cubes on load so there is a single source of truth on disk.

use std::path::{Path, PathBuf};

use unobs_core::benchmark::Benchmark;
use unobs_core::hsio::{
    load_hsi, load_ssf_csv, save_hsi, save_ssf_csv, synthesize_rgb, to_srgb8, iter_patches,
    HyperCube, PatchSpec,
};
use unobs_core::spectral::{split_ssf, SpectralSensitivity};
use unobs_core::{Error, Result};

pub fn write_dataset(bench: &Benchmark<f64>, dir: &Path) -> Result<()> {
    for sub in ["train", "test"] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    save_ssf_csv(&bench.ssf, dir.join("ssf.csv"))?;
    for (split, cubes) in [("train", &bench.train), ("test", &bench.test)] {
        for (i, (hsi, _)) in cubes.iter().enumerate() {
            save_hsi(hsi, dir.join(split).join(format!("cube_{i:03}.hsc1")))?;
        }
    }
    Ok(())
}

/// Camera plus (ground truth, render) pairs for one split. A missing layout
/// is a dependency failure: data prep has not run yet.
pub fn load_split(
    dir: &Path,
    split: &str,
) -> Result<(SpectralSensitivity<f64>, Vec<(HyperCube<f64>, HyperCube<f64>)>)> {
    let ssf_path = dir.join("ssf.csv");
    if !ssf_path.is_file() {
        return Err(Error::Dependency(format!(
            "no camera response at {}; run synth-data (or point data_dir elsewhere) first",
            ssf_path.display()
        )));
    }
    let ssf = split_ssf(load_ssf_csv(&ssf_path)?)?;
    let sub = dir.join(split);
    let entries = std::fs::read_dir(&sub).map_err(|_| {
        Error::Dependency(format!(
            "no {split} split at {}; run synth-data first",
            sub.display()
        ))
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "hsc1"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Dependency(format!(
            "the {split} split at {} is empty; run synth-data first",
            sub.display()
        )));
    }
    let mut data = Vec::with_capacity(files.len());
    for f in files {
        let hsi = load_hsi(&f)?;
        let rgb = synthesize_rgb(&hsi, &ssf)?;
        data.push((hsi, rgb));
    }
    Ok((ssf, data))
}

/// Cut training pairs into patches when the configured patch fits inside the
/// images; otherwise the cubes are used whole. Renders are recomputed per
/// patch so each pair stays exactly consistent.
pub fn patchify(
    data: Vec<(HyperCube<f64>, HyperCube<f64>)>,
    ssf: &SpectralSensitivity<f64>,
    size: usize,
    stride: usize,
) -> Result<Vec<(HyperCube<f64>, HyperCube<f64>)>> {
    let fits = data.iter().all(|(hsi, _)| size <= hsi.nx() && size <= hsi.ny());
    if !fits {
        return Ok(data);
    }
    let spec = PatchSpec::new(size, stride, false)?;
    let mut out = Vec::new();
    for (hsi, _) in &data {
        for patch in iter_patches(hsi, spec, 0)? {
            let rgb = synthesize_rgb(&patch, ssf)?;
            out.push((patch, rgb));
        }
    }
    Ok(out)
}

pub fn write_png(path: &Path, rgb: &HyperCube<f64>) -> Result<()> {
    let bytes = to_srgb8(rgb)?;
    image::save_buffer(
        path,
        &bytes,
        rgb.nx() as u32,
        rgb.ny() as u32,
        image::ColorType::Rgb8,
    )
    .map_err(|e| Error::file_format(path, e.to_string()))
}

/// Two-column loss curve, `iter,loss`.
pub fn write_curve_csv(path: &Path, header: &str, rows: &[(usize, f64)]) -> Result<()> {
    let mut out = String::from(header);
    out.push('\n');
    for (i, v) in rows {
        out.push_str(&format!("{i},{v}\n"));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
