//! Subspace split of a camera's spectral response. A 3xB response matrix P
//! sees only a 3-dimensional slice of spectrum space; the remaining B-3
//! dimensions are invisible to the camera. This module computes orthonormal
//! bases for both parts, projects cubes onto them, and parameterizes the full
//! set of cubes that render to a given RGB image.

use crate::hsio::HyperCube;
use crate::linalg::{self, Mat};
use crate::{Error, Result, Scalar};

/// Singular values below this fraction of the largest count as zero when
/// deciding whether the response has full rank.
pub const RANK_TOL: f64 = 1e-9;

/// Condition-number ceiling for the 3x3 observable-to-RGB map; beyond it the
/// particular solution is numerically untrustworthy.
pub const COND_LIMIT: f64 = 1e8;

/// Camera spectral response plus, once split, orthonormal bases for the row
/// space (`v1`, B x 3) and the null space (`v0`, B x (B-3)).
#[derive(Debug, Clone)]
pub struct SpectralSensitivity<S> {
    wavelengths: Vec<S>,
    p: Mat<S>,
    split: Option<SsfSplit<S>>,
}

#[derive(Debug, Clone)]
struct SsfSplit<S> {
    v1: Mat<S>,
    v0: Mat<S>,
    /// v1 (P v1)^-1, the lift taking an RGB pixel to the minimal-assumption
    /// spectrum consistent with it.
    pinv_lift: Mat<S>,
}

impl<S: Scalar> SpectralSensitivity<S> {
    /// Build from a 3xB matrix; bases stay unpopulated until [`split_ssf`].
    pub fn from_matrix(wavelengths: Vec<S>, p: Mat<S>) -> Result<Self> {
        if p.rows() != 3 {
            return Err(Error::Shape(format!("response must have 3 rows, got {}", p.rows())));
        }
        if p.cols() != wavelengths.len() {
            return Err(Error::Shape(format!(
                "response has {} columns but {} wavelengths",
                p.cols(),
                wavelengths.len()
            )));
        }
        if !p.is_finite() {
            return Err(Error::Data("response contains non-finite entries".into()));
        }
        Ok(SpectralSensitivity { wavelengths, p, split: None })
    }

    pub fn from_rows(wavelengths: Vec<S>, rows: [Vec<S>; 3]) -> Result<Self> {
        let b = rows[0].len();
        if rows.iter().any(|r| r.len() != b) {
            return Err(Error::Shape("response rows have differing lengths".into()));
        }
        let mut data = Vec::with_capacity(3 * b);
        for r in &rows {
            data.extend_from_slice(r);
        }
        SpectralSensitivity::from_matrix(wavelengths, Mat::from_vec(3, b, data))
    }

    pub fn bands(&self) -> usize {
        self.p.cols()
    }

    pub fn wavelengths(&self) -> &[S] {
        &self.wavelengths
    }

    pub fn matrix(&self) -> &Mat<S> {
        &self.p
    }

    pub fn is_split(&self) -> bool {
        self.split.is_some()
    }

    fn split_ref(&self) -> Result<&SsfSplit<S>> {
        self.split
            .as_ref()
            .ok_or_else(|| Error::Contract("response not split; call split_ssf first".into()))
    }

    /// Orthonormal basis of the camera-visible subspace, B x 3.
    pub fn v1(&self) -> Result<&Mat<S>> {
        Ok(&self.split_ref()?.v1)
    }

    /// Orthonormal basis of the camera null space, B x (B-3).
    pub fn v0(&self) -> Result<&Mat<S>> {
        Ok(&self.split_ref()?.v0)
    }

    /// The B x 3 lift `v1 (P v1)^-1`, mapping RGB to the particular solution.
    pub fn pinv_lift(&self) -> Result<&Mat<S>> {
        Ok(&self.split_ref()?.pinv_lift)
    }
}

/// Populate the subspace bases of a response by full QR of P^T, with rank
/// checked against the singular-value spread. Scaling P by any c > 0 leaves
/// both subspaces unchanged.
pub fn split_ssf<S: Scalar>(ssf: SpectralSensitivity<S>) -> Result<SpectralSensitivity<S>> {
    let b = ssf.bands();
    if b <= 3 {
        return Err(Error::Degenerate(format!("need more than 3 bands for a null space, got {b}")));
    }
    let sv = linalg::singular_values(&ssf.p);
    let smax = sv[0];
    if smax == S::zero() || sv[2] < S::cst(RANK_TOL) * smax {
        return Err(Error::Degenerate(
            "response is rank-deficient; its rows do not span three directions".into(),
        ));
    }
    let q = linalg::full_qr_q(&ssf.p.transpose());
    let v1 = q.col_block(0, 3);
    let v0 = q.col_block(3, b);
    let pv1 = ssf.p.matmul(&v1);
    let cond = linalg::condition_number(&pv1);
    if !cond.is_finite() || cond > S::cst(COND_LIMIT) {
        return Err(Error::IllConditioned(format!(
            "observable-to-RGB map has condition number {:e}",
            cond.f64()
        )));
    }
    let pinv_lift = v1.matmul(&linalg::inverse(&pv1)?);
    Ok(SpectralSensitivity { split: Some(SsfSplit { v1, v0, pinv_lift }), ..ssf })
}

/// A cube's coordinates in the two subspaces: `observable` is 3 x nx x ny in
/// the v1 basis, `unobservable` is (B-3) x nx x ny in the v0 basis.
#[derive(Debug, Clone)]
pub struct FeatureSplit<S> {
    pub nx: usize,
    pub ny: usize,
    pub observable: Vec<S>,
    pub unobservable: Vec<S>,
}

impl<S: Scalar> FeatureSplit<S> {
    pub fn unobservable_channels(&self) -> usize {
        self.unobservable.len() / (self.nx * self.ny)
    }
}

/// Apply `m^T` along the band axis: out[j, p] = sum_b m[b, j] in[b, p].
pub(crate) fn project_bands<S: Scalar>(data: &[S], bands: usize, npix: usize, m: &Mat<S>) -> Vec<S> {
    debug_assert_eq!(m.rows(), bands);
    let cols = m.cols();
    let mut out = vec![S::zero(); cols * npix];
    for b in 0..bands {
        let band = &data[b * npix..(b + 1) * npix];
        for j in 0..cols {
            let w = m[(b, j)];
            if w == S::zero() {
                continue;
            }
            let o = &mut out[j * npix..(j + 1) * npix];
            for (ov, &v) in o.iter_mut().zip(band) {
                *ov += w * v;
            }
        }
    }
    out
}

/// Apply `m` along the channel axis: out[b, p] = sum_j m[b, j] in[j, p].
pub(crate) fn lift_bands<S: Scalar>(data: &[S], channels: usize, npix: usize, m: &Mat<S>) -> Vec<S> {
    debug_assert_eq!(m.cols(), channels);
    let bands = m.rows();
    let mut out = vec![S::zero(); bands * npix];
    for j in 0..channels {
        let chan = &data[j * npix..(j + 1) * npix];
        for b in 0..bands {
            let w = m[(b, j)];
            if w == S::zero() {
                continue;
            }
            let o = &mut out[b * npix..(b + 1) * npix];
            for (ov, &v) in o.iter_mut().zip(chan) {
                *ov += w * v;
            }
        }
    }
    out
}

/// Project a cube onto the observable and unobservable bases.
pub fn extract_features<S: Scalar>(
    hsi: &HyperCube<S>,
    ssf: &SpectralSensitivity<S>,
) -> Result<FeatureSplit<S>> {
    if hsi.bands() != ssf.bands() {
        return Err(Error::Shape(format!(
            "cube has {} bands, response expects {}",
            hsi.bands(),
            ssf.bands()
        )));
    }
    let v1 = ssf.v1()?;
    let v0 = ssf.v0()?;
    let npix = hsi.pixels();
    Ok(FeatureSplit {
        nx: hsi.nx(),
        ny: hsi.ny(),
        observable: project_bands(hsi.data(), hsi.bands(), npix, v1),
        unobservable: project_bands(hsi.data(), hsi.bands(), npix, v0),
    })
}

/// Invert [`extract_features`]: hsi = v1 * observable + v0 * unobservable.
pub fn reconstruct_from_split<S: Scalar>(
    split: &FeatureSplit<S>,
    ssf: &SpectralSensitivity<S>,
    wavelengths: Vec<S>,
) -> Result<HyperCube<S>> {
    let v1 = ssf.v1()?;
    let v0 = ssf.v0()?;
    let npix = split.nx * split.ny;
    let mut data = lift_bands(&split.observable, 3, npix, v1);
    let un = lift_bands(&split.unobservable, v0.cols(), npix, v0);
    for (d, u) in data.iter_mut().zip(un) {
        *d += u;
    }
    HyperCube::new(wavelengths, split.nx, split.ny, data)
}

/// The affine set of cubes rendering to a fixed RGB image: a particular
/// solution plus any null-space field.
#[derive(Debug, Clone)]
pub struct SolutionSpace<S> {
    pub particular: HyperCube<S>,
    /// Null basis v0, B x (B-3); members are particular + v0 * zeta.
    pub null_basis: Mat<S>,
}

impl<S: Scalar> SolutionSpace<S> {
    /// The member selected by a null coordinate field zeta, (B-3) x nx x ny.
    pub fn member(&self, zeta: &[S]) -> Result<HyperCube<S>> {
        let npix = self.particular.pixels();
        let k = self.null_basis.cols();
        if zeta.len() != k * npix {
            return Err(Error::Shape(format!(
                "zeta length {} != {} channels x {} pixels",
                zeta.len(),
                k,
                npix
            )));
        }
        let mut data = self.particular.data().to_vec();
        let lifted = lift_bands(zeta, k, npix, &self.null_basis);
        for (d, l) in data.iter_mut().zip(lifted) {
            *d += l;
        }
        HyperCube::new(
            self.particular.wavelengths().to_vec(),
            self.particular.nx(),
            self.particular.ny(),
            data,
        )
    }
}

/// The full solution set for an RGB image under a split response.
pub fn solution_space<S: Scalar>(
    rgb: &HyperCube<S>,
    ssf: &SpectralSensitivity<S>,
) -> Result<SolutionSpace<S>> {
    if rgb.bands() != 3 {
        return Err(Error::Shape(format!("expected a 3-band RGB cube, got {}", rgb.bands())));
    }
    let pv1 = ssf.p.matmul(ssf.v1()?);
    let cond = linalg::condition_number(&pv1);
    if !cond.is_finite() || cond > S::cst(COND_LIMIT) {
        return Err(Error::IllConditioned(format!(
            "observable-to-RGB map has condition number {:e}",
            cond.f64()
        )));
    }
    let lift = ssf.pinv_lift()?;
    let npix = rgb.pixels();
    let data = lift_bands(rgb.data(), 3, npix, lift);
    let particular = HyperCube::new(ssf.wavelengths.clone(), rgb.nx(), rgb.ny(), data)?;
    Ok(SolutionSpace { particular, null_basis: ssf.v0()?.clone() })
}

/// One RGB-consistent cube: the particular solution shifted by `zeta`
/// (`None` selects the pseudo-inverse member, zeta = 0).
pub fn reconstruct_solution<S: Scalar>(
    rgb: &HyperCube<S>,
    zeta: Option<&[S]>,
    ssf: &SpectralSensitivity<S>,
) -> Result<HyperCube<S>> {
    let space = solution_space(rgb, ssf)?;
    match zeta {
        None => Ok(space.particular),
        Some(z) => space.member(z),
    }
}
