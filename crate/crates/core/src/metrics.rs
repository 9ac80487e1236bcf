//! Reconstruction quality metrics: PSNR over the whole cube and per band,
//! single-scale SSIM averaged over bands, and the mean spectral angle (SAM).

use std::io;

use crate::hsio::HyperCube;
use crate::{Error, Result, Scalar};

/// SSIM window edge; images must be at least this wide and tall.
pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Everything the evaluation CLI reports for one image pair.
#[derive(Debug, Clone)]
pub struct EvalReport<S> {
    pub psnr: S,
    pub per_band_psnr: Vec<S>,
    pub ssim: S,
    pub sam_degrees: S,
    /// Pixels left out of the SAM mean because the reference spectrum is zero.
    pub sam_excluded: usize,
    /// Set when MSE is exactly zero; `psnr` then holds the +inf sentinel.
    pub identical: bool,
}

fn check_same_shape<S: Scalar>(est: &HyperCube<S>, reference: &HyperCube<S>) -> Result<()> {
    if !est.same_grid(reference) {
        return Err(Error::Shape(format!(
            "metric operands differ in shape: {}x{}x{} vs {}x{}x{}",
            est.bands(),
            est.nx(),
            est.ny(),
            reference.bands(),
            reference.nx(),
            reference.ny()
        )));
    }
    Ok(())
}

fn mse<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (x, y) in a.iter().zip(b) {
        let d = *x - *y;
        acc += d * d;
    }
    acc / S::cst(a.len() as f64)
}

/// Peak signal-to-noise ratio in dB; +inf when the cubes are identical.
pub fn psnr<S: Scalar>(est: &HyperCube<S>, reference: &HyperCube<S>, peak: S) -> Result<S> {
    check_same_shape(est, reference)?;
    let m = mse(est.data(), reference.data());
    if m == S::zero() {
        return Ok(S::infinity());
    }
    Ok(S::cst(10.0) * (peak * peak / m).log10())
}

/// PSNR of each band separately, same peak convention as [`psnr`].
pub fn per_band_psnr<S: Scalar>(
    est: &HyperCube<S>,
    reference: &HyperCube<S>,
    peak: S,
) -> Result<Vec<S>> {
    check_same_shape(est, reference)?;
    let mut out = Vec::with_capacity(est.bands());
    for b in 0..est.bands() {
        let m = mse(est.band(b), reference.band(b));
        out.push(if m == S::zero() {
            S::infinity()
        } else {
            S::cst(10.0) * (peak * peak / m).log10()
        });
    }
    Ok(out)
}

/// Mean spectral angle in degrees plus the count of excluded pixels.
///
/// Pixels whose reference spectrum has zero norm carry no direction and are
/// excluded (and counted); a zero estimate against a nonzero reference is
/// scored as 90 degrees. The arccos argument is clamped to [-1, 1].
pub fn sam<S: Scalar>(est: &HyperCube<S>, reference: &HyperCube<S>) -> Result<(S, usize)> {
    check_same_shape(est, reference)?;
    let npix = est.pixels();
    let bands = est.bands();
    let mut acc = S::zero();
    let mut used = 0usize;
    let mut excluded = 0usize;
    for p in 0..npix {
        let mut dot = S::zero();
        let mut ne = S::zero();
        let mut nr = S::zero();
        for b in 0..bands {
            let e = est.data()[b * npix + p];
            let r = reference.data()[b * npix + p];
            dot += e * r;
            ne += e * e;
            nr += r * r;
        }
        if nr == S::zero() {
            excluded += 1;
            continue;
        }
        let angle = if ne == S::zero() {
            S::cst(std::f64::consts::FRAC_PI_2)
        } else {
            let c = (dot / (ne.sqrt() * nr.sqrt())).max(-S::one()).min(S::one());
            c.acos()
        };
        acc += angle;
        used += 1;
    }
    if used == 0 {
        return Err(Error::Domain("spectral angle undefined: every reference pixel is zero".into()));
    }
    let mean = acc / S::cst(used as f64);
    Ok((mean * S::cst(180.0 / std::f64::consts::PI), excluded))
}

fn gaussian_window<S: Scalar>() -> Vec<S> {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    let mut sum = 0.0;
    for j in 0..SSIM_WINDOW {
        for i in 0..SSIM_WINDOW {
            let dx = i as f64 - c;
            let dy = j as f64 - c;
            let v = (-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            sum += v;
            w.push(v);
        }
    }
    w.into_iter().map(|v| S::cst(v / sum)).collect()
}

/// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), evaluated at
/// every fully-interior window position, averaged over positions and bands.
/// Peak is fixed at 1.
pub fn ssim<S: Scalar>(est: &HyperCube<S>, reference: &HyperCube<S>) -> Result<S> {
    check_same_shape(est, reference)?;
    let (nx, ny) = (est.nx(), est.ny());
    if nx < SSIM_WINDOW || ny < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {nx}x{ny}"
        )));
    }
    let w = gaussian_window::<S>();
    let c1 = S::cst(SSIM_K1 * SSIM_K1);
    let c2 = S::cst(SSIM_K2 * SSIM_K2);
    let npix = nx * ny;
    let mut band_mean = S::zero();
    for b in 0..est.bands() {
        let eb = &est.data()[b * npix..(b + 1) * npix];
        let rb = &reference.data()[b * npix..(b + 1) * npix];
        let mut acc = S::zero();
        let mut count = 0usize;
        for y0 in 0..=(ny - SSIM_WINDOW) {
            for x0 in 0..=(nx - SSIM_WINDOW) {
                let mut mx = S::zero();
                let mut my = S::zero();
                let mut sxx = S::zero();
                let mut syy = S::zero();
                let mut sxy = S::zero();
                for j in 0..SSIM_WINDOW {
                    for i in 0..SSIM_WINDOW {
                        let wv = w[j * SSIM_WINDOW + i];
                        let x = eb[(y0 + j) * nx + (x0 + i)];
                        let y = rb[(y0 + j) * nx + (x0 + i)];
                        mx += wv * x;
                        my += wv * y;
                        sxx += wv * x * x;
                        syy += wv * y * y;
                        sxy += wv * x * y;
                    }
                }
                let vx = sxx - mx * mx;
                let vy = syy - my * my;
                let cxy = sxy - mx * my;
                let two = S::cst(2.0);
                let val = ((two * mx * my + c1) * (two * cxy + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                acc += val;
                count += 1;
            }
        }
        band_mean += acc / S::cst(count as f64);
    }
    Ok(band_mean / S::cst(est.bands() as f64))
}

/// All metrics for one pair; SSIM requires the window to fit.
pub fn evaluate<S: Scalar>(est: &HyperCube<S>, reference: &HyperCube<S>) -> Result<EvalReport<S>> {
    let peak = S::one();
    let p = psnr(est, reference, peak)?;
    let per_band = per_band_psnr(est, reference, peak)?;
    let s = ssim(est, reference)?;
    let (a, excluded) = sam(est, reference)?;
    Ok(EvalReport {
        psnr: p,
        per_band_psnr: per_band,
        ssim: s,
        sam_degrees: a,
        sam_excluded: excluded,
        identical: !p.is_finite(),
    })
}

/// Write `image,psnr,ssim,sam` rows for a set of named reports.
pub fn write_report_csv<S: Scalar, W: io::Write>(
    out: W,
    rows: &[(String, EvalReport<S>)],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let ctx = |e: csv::Error| Error::Data(format!("report write failed: {e}"));
    w.write_record(["image", "psnr", "ssim", "sam"]).map_err(ctx)?;
    for (name, r) in rows {
        w.write_record([
            name.clone(),
            format!("{}", r.psnr.f64()),
            format!("{}", r.ssim.f64()),
            format!("{}", r.sam_degrees.f64()),
        ])
        .map_err(ctx)?;
    }
    w.flush().map_err(|e| Error::Data(format!("report write failed: {e}")))?;
    Ok(())
}
