//! Illuminant swaps. The spectral route reconstructs a hyperspectral estimate,
//! divides out the source illuminant band by band (interpolating across bands
//! the source barely excites), re-applies the target illuminant, and renders
//! back to RGB. Three RGB-space baselines ship alongside for comparison:
//! channel-gain relighting, gray-world, and perfect-reflector normalization.

use crate::hsio::{synthesize_rgb, HyperCube, Illuminant};
use crate::spectral::SpectralSensitivity;
use crate::{Error, Result, Scalar};

/// Fraction of the source's peak power below which a band is treated as
/// unexcited and its reflectance interpolated instead of divided.
pub const OMEGA_FRACTION: f64 = 0.1;

/// Anything that can produce a hyperspectral estimate from a 3-band cube.
/// The spectral relighting path is generic over this so oracles, baselines,
/// and the learned pipeline all plug into the same algorithm.
pub trait SpectralReconstructor<S: Scalar>: Sync {
    fn reconstruct(&self, rgb: &HyperCube<S>) -> Result<HyperCube<S>>;
}

impl<S: Scalar, F> SpectralReconstructor<S> for F
where
    F: Fn(&HyperCube<S>) -> Result<HyperCube<S>> + Sync,
{
    fn reconstruct(&self, rgb: &HyperCube<S>) -> Result<HyperCube<S>> {
        self(rgb)
    }
}

/// One relighting request: swap `source` for `target` on `input_rgb` using
/// `sr` to supply the hyperspectral estimate. Bands whose source power falls
/// below `threshold` are interpolated rather than divided.
pub struct RelightJob<'a, S: Scalar> {
    pub input_rgb: &'a HyperCube<S>,
    pub source: &'a Illuminant<S>,
    pub target: &'a Illuminant<S>,
    pub ssf: &'a SpectralSensitivity<S>,
    pub threshold: S,
    pub sr: &'a (dyn SpectralReconstructor<S> + 'a),
}

fn check_grid<S: Scalar>(l: &Illuminant<S>, ssf: &SpectralSensitivity<S>, which: &str) -> Result<()> {
    if l.wavelengths != ssf.wavelengths() {
        return Err(Error::Shape(format!("{which} illuminant grid does not match the camera grid")));
    }
    Ok(())
}

impl<'a, S: Scalar> RelightJob<'a, S> {
    /// Standard job with the threshold at [`OMEGA_FRACTION`] of the source's
    /// peak power.
    pub fn new(
        input_rgb: &'a HyperCube<S>,
        source: &'a Illuminant<S>,
        target: &'a Illuminant<S>,
        ssf: &'a SpectralSensitivity<S>,
        sr: &'a (dyn SpectralReconstructor<S> + 'a),
    ) -> Self {
        let threshold = S::cst(OMEGA_FRACTION) * source.max_power();
        RelightJob { input_rgb, source, target, ssf, threshold, sr }
    }

    fn validate(&self) -> Result<()> {
        if self.input_rgb.bands() != 3 {
            return Err(Error::Shape(format!(
                "expected a 3-band RGB cube, got {}",
                self.input_rgb.bands()
            )));
        }
        check_grid(self.source, self.ssf, "source")?;
        check_grid(self.target, self.ssf, "target")?;
        if !(self.threshold > S::zero()) {
            return Err(Error::Domain("excitation threshold must be positive".into()));
        }
        Ok(())
    }
}

/// Spectral relighting: divide the reconstructed cube by the source power
/// outside the unexcited set, fill the unexcited bands per pixel by linear
/// interpolation in wavelength between the nearest excited bands (flat at
/// the spectrum ends), multiply by the target power, and render to RGB.
/// Power values below the threshold are never used as divisors.
pub fn relight_hsi<S: Scalar>(job: &RelightJob<'_, S>) -> Result<HyperCube<S>> {
    job.validate()?;
    let bands = job.ssf.bands();
    let l = &job.source.power;
    let tau = job.threshold;
    let kept: Vec<usize> = (0..bands).filter(|&b| l[b] >= tau).collect();
    if kept.is_empty() {
        return Err(Error::Domain(
            "unusable illuminant: every band falls below the excitation threshold".into(),
        ));
    }
    let y = job.sr.reconstruct(job.input_rgb)?;
    if y.bands() != bands || y.wavelengths() != job.ssf.wavelengths() {
        return Err(Error::Shape("reconstructed cube does not match the camera grid".into()));
    }
    if y.nx() != job.input_rgb.nx() || y.ny() != job.input_rgb.ny() {
        return Err(Error::Shape("reconstructed cube does not match the input extent".into()));
    }
    let npix = y.pixels();
    let wl = job.ssf.wavelengths();
    let mut refl = vec![S::zero(); bands * npix];
    for &b in &kept {
        for p in 0..npix {
            refl[b * npix + p] = y.data()[b * npix + p] / l[b];
        }
    }
    for b in 0..bands {
        if l[b] >= tau {
            continue;
        }
        let left = kept.iter().rev().find(|&&k| k < b).copied();
        let right = kept.iter().find(|&&k| k > b).copied();
        match (left, right) {
            (Some(a), Some(c)) => {
                let w = (wl[b] - wl[a]) / (wl[c] - wl[a]);
                for p in 0..npix {
                    refl[b * npix + p] =
                        (S::one() - w) * refl[a * npix + p] + w * refl[c * npix + p];
                }
            }
            (Some(a), None) => {
                for p in 0..npix {
                    refl[b * npix + p] = refl[a * npix + p];
                }
            }
            (None, Some(c)) => {
                for p in 0..npix {
                    refl[b * npix + p] = refl[c * npix + p];
                }
            }
            (None, None) => unreachable!("kept is non-empty"),
        }
    }
    for b in 0..bands {
        let g = job.target.power[b];
        for v in &mut refl[b * npix..(b + 1) * npix] {
            *v *= g;
        }
    }
    let relit = HyperCube::new(wl.to_vec(), y.nx(), y.ny(), refl)?;
    synthesize_rgb(&relit, job.ssf)
}

/// Channel-gain relighting entirely in RGB: scale each channel by the ratio
/// of the camera's response to the target and source illuminants.
pub fn rgb_re<S: Scalar>(
    input_rgb: &HyperCube<S>,
    source: &Illuminant<S>,
    target: &Illuminant<S>,
    ssf: &SpectralSensitivity<S>,
) -> Result<HyperCube<S>> {
    if input_rgb.bands() != 3 {
        return Err(Error::Shape(format!("expected a 3-band RGB cube, got {}", input_rgb.bands())));
    }
    check_grid(source, ssf, "source")?;
    check_grid(target, ssf, "target")?;
    let pl = ssf.matrix().matvec(&source.power);
    let pld = ssf.matrix().matvec(&target.power);
    if pl.iter().any(|&v| !(v > S::zero())) {
        return Err(Error::Domain("source illuminant produces a zero channel gain".into()));
    }
    let npix = input_rgb.pixels();
    let mut data = input_rgb.data().to_vec();
    for c in 0..3 {
        let g = pld[c] / pl[c];
        for v in &mut data[c * npix..(c + 1) * npix] {
            *v *= g;
        }
    }
    HyperCube::new(input_rgb.wavelengths().to_vec(), input_rgb.nx(), input_rgb.ny(), data)
}

/// Gray-world white balance: normalize each channel by its mean, then scale
/// so the output's global mean matches the input's.
pub fn gray_world<S: Scalar>(input_rgb: &HyperCube<S>) -> Result<HyperCube<S>> {
    if input_rgb.bands() != 3 {
        return Err(Error::Shape(format!("expected a 3-band RGB cube, got {}", input_rgb.bands())));
    }
    let npix = input_rgb.pixels();
    let n = S::cst(npix as f64);
    let means: Vec<S> = (0..3)
        .map(|c| input_rgb.data()[c * npix..(c + 1) * npix].iter().copied().sum::<S>() / n)
        .collect();
    if means.iter().any(|&m| m == S::zero()) {
        return Err(Error::Domain("a channel mean is zero; gray-world balance is undefined".into()));
    }
    let gray = (means[0] + means[1] + means[2]) / S::cst(3.0);
    let mut data = input_rgb.data().to_vec();
    for c in 0..3 {
        let g = gray / means[c];
        for v in &mut data[c * npix..(c + 1) * npix] {
            *v *= g;
        }
    }
    HyperCube::new(input_rgb.wavelengths().to_vec(), input_rgb.nx(), input_rgb.ny(), data)
}

/// Perfect-reflector white balance: divide each channel by its maximum, so
/// the brightest pixel is assumed to reflect everything. Scenes without a
/// bright neutral reflector shift colors; that failure mode is inherent to
/// the assumption, not guarded here.
pub fn perfect_reflector<S: Scalar>(input_rgb: &HyperCube<S>) -> Result<HyperCube<S>> {
    if input_rgb.bands() != 3 {
        return Err(Error::Shape(format!("expected a 3-band RGB cube, got {}", input_rgb.bands())));
    }
    let npix = input_rgb.pixels();
    let maxima: Vec<S> = (0..3)
        .map(|c| {
            input_rgb.data()[c * npix..(c + 1) * npix]
                .iter()
                .copied()
                .fold(S::neg_infinity(), S::max)
        })
        .collect();
    if maxima.iter().any(|&m| !(m > S::zero())) {
        return Err(Error::Domain("a channel maximum is not positive; no reflector to pin".into()));
    }
    let mut data = input_rgb.data().to_vec();
    for c in 0..3 {
        for v in &mut data[c * npix..(c + 1) * npix] {
            *v /= maxima[c];
        }
    }
    HyperCube::new(input_rgb.wavelengths().to_vec(), input_rgb.nx(), input_rgb.ny(), data)
}
