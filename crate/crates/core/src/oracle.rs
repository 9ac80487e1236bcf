//! Independent references the learned pipeline is checked against: synthetic
//! linear-manifold scenes with known generating coefficients, closed-form
//! reconstructions, an analytic Gaussian posterior denoiser with a quadrature
//! counterpart, and the exact affine law of the deterministic sampler on a
//! Gaussian toy. Everything here is computed by a different route than the
//! production code it validates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::hsio::HyperCube;
use crate::linalg::{self, Mat};
use crate::nn::Tensor;
use crate::spectral::{self, SpectralSensitivity};
use crate::uldm::{Denoiser, DiffusionSchedule};
use crate::{Error, Result, Scalar};

const COND_LIMIT: f64 = 1e8;
const RIDGE: f64 = 1e-12;

/// Low-dimensional linear spectral manifold: every generated spectrum is a
/// combination of `dim` orthonormal basis spectra, the first of which is
/// strictly positive so coefficient fields can keep cubes inside [0, 1].
#[derive(Debug, Clone)]
pub struct SyntheticManifold<S> {
    u: Mat<S>,
}

impl<S: Scalar> SyntheticManifold<S> {
    pub fn new(bands: usize, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 || dim > bands {
            return Err(Error::Shape(format!("manifold dim {dim} outside 1..={bands}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = Mat::zeros(bands, dim);
        // Leading direction: a smooth positive spectral profile, so the
        // normalized first basis column stays entrywise positive.
        let center = rng.gen_range(0.25..0.75) * bands as f64;
        let width = rng.gen_range(0.15..0.35) * bands as f64;
        for b in 0..bands {
            let g = (-((b as f64 - center) / width).powi(2)).exp();
            a[(b, 0)] = S::cst(0.35 + g);
        }
        for k in 1..dim {
            let (f1, f2) = (rng.gen_range(1.0..5.0), rng.gen_range(1.0..5.0));
            let (p1, p2) = (
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.0..std::f64::consts::TAU),
            );
            for b in 0..bands {
                let x = b as f64 / bands as f64;
                a[(b, k)] = S::cst((f1 * x * std::f64::consts::TAU + p1).sin()
                    + 0.5 * (f2 * x * std::f64::consts::TAU + p2).cos());
            }
        }
        let q = linalg::full_qr_q(&a).col_block(0, dim);
        Self::from_basis(q)
    }

    /// Wrap an explicit orthonormal basis (columns), re-signing the first
    /// column positive when possible.
    pub fn from_basis(mut u: Mat<S>) -> Result<Self> {
        let defect = linalg::orthonormality_defect(&u);
        if defect > S::cst(1e-12) {
            return Err(Error::Data(format!("basis orthonormality defect {}", defect.f64())));
        }
        let head: S = (0..u.rows()).map(|b| u[(b, 0)]).sum();
        if head < S::zero() {
            for b in 0..u.rows() {
                u[(b, 0)] = -u[(b, 0)];
            }
        }
        Ok(SyntheticManifold { u })
    }

    pub fn basis(&self) -> &Mat<S> {
        &self.u
    }

    pub fn bands(&self) -> usize {
        self.u.rows()
    }

    pub fn dim(&self) -> usize {
        self.u.cols()
    }
}

/// One smooth field in [-1, 1] on the unit square, sampled at nx x ny.
pub(crate) fn smooth_field<S: Scalar>(nx: usize, ny: usize, rng: &mut ChaCha8Rng) -> Vec<S> {
    let tau = std::f64::consts::TAU;
    let (a, b) = (rng.gen_range(0.5..2.5), rng.gen_range(0.5..2.5));
    let (c, d) = (rng.gen_range(0.5..2.5), rng.gen_range(0.5..2.5));
    let (p1, p2) = (rng.gen_range(0.0..tau), rng.gen_range(0.0..tau));
    let mut out = Vec::with_capacity(nx * ny);
    for y in 0..ny {
        for x in 0..nx {
            let (u, v) = (x as f64 / nx as f64, y as f64 / ny as f64);
            let s = 0.5 * ((tau * (a * u + b * v) + p1).sin() + (tau * (c * u - d * v) + p2).sin());
            out.push(S::cst(s));
        }
    }
    out
}

/// Draw a cube whose every spectrum is a positive manifold combination. The
/// leading coefficient field dominates the bounded fluctuation fields, so the
/// result lies in (0, 1) by construction and on the manifold exactly; the
/// final rescale is multiplicative and keeps spectra in span(U).
pub fn sample_manifold_hsi<S: Scalar>(
    m: &SyntheticManifold<S>,
    wavelengths: Vec<S>,
    nx: usize,
    ny: usize,
    seed: u64,
) -> Result<HyperCube<S>> {
    if wavelengths.len() != m.bands() {
        return Err(Error::Shape(format!(
            "{} wavelengths for a {}-band manifold",
            wavelengths.len(),
            m.bands()
        )));
    }
    let l = m.dim();
    let npix = nx * ny;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u1min = (0..m.bands()).map(|b| m.u[(b, 0)]).fold(S::infinity(), |a, v| a.min(v));
    let (lo, hi) = (S::one(), S::cst(2.0));
    let fluct = if l > 1 {
        lo * u1min / (S::cst(2.0) * S::cst((l - 1) as f64))
    } else {
        S::zero()
    };
    let mut coeffs = vec![S::zero(); l * npix];
    let base = smooth_field::<S>(nx, ny, &mut rng);
    let half = S::cst(0.5);
    for p in 0..npix {
        coeffs[p] = lo + (hi - lo) * (half + half * base[p]);
    }
    for k in 1..l {
        let f = smooth_field::<S>(nx, ny, &mut rng);
        for p in 0..npix {
            coeffs[k * npix + p] = fluct * f[p];
        }
    }
    let mut data = spectral::lift_bands(&coeffs, l, npix, &m.u);
    let scale = S::cst(0.95) / (hi + S::cst((l - 1) as f64) * fluct);
    for v in &mut data {
        *v *= scale;
    }
    HyperCube::new(wavelengths, nx, ny, data)
}

/// Closed-form inversion on a 3-dim manifold: with P·U invertible, the RGB
/// pixel determines the coefficients, so the cube is recovered exactly.
pub fn exact_manifold_reconstruct<S: Scalar>(
    rgb: &HyperCube<S>,
    m: &SyntheticManifold<S>,
    ssf: &SpectralSensitivity<S>,
) -> Result<HyperCube<S>> {
    if m.dim() != 3 {
        return Err(Error::Shape(format!("exact inversion needs a 3-dim manifold, got {}", m.dim())));
    }
    if rgb.bands() != 3 {
        return Err(Error::Shape(format!("expected a 3-band RGB cube, got {}", rgb.bands())));
    }
    if m.bands() != ssf.bands() {
        return Err(Error::Shape("manifold and response band counts differ".into()));
    }
    let pu = ssf.matrix().matmul(&m.u);
    let cond = linalg::condition_number(&pu);
    if !(cond < S::cst(COND_LIMIT)) {
        return Err(Error::IllConditioned(format!(
            "camera-projected basis condition {:e}",
            cond.f64()
        )));
    }
    let lift = m.u.matmul(&linalg::inverse(&pu)?);
    let data = spectral::lift_bands(rgb.data(), 3, rgb.pixels(), &lift);
    HyperCube::new(ssf.wavelengths().to_vec(), rgb.nx(), rgb.ny(), data)
}

fn manifold_camera_parts<S: Scalar>(
    m: &SyntheticManifold<S>,
    ssf: &SpectralSensitivity<S>,
) -> Result<(Mat<S>, Mat<S>)> {
    if m.dim() <= 3 {
        return Err(Error::Shape(format!(
            "ambiguous reconstruction needs dim > 3, got {}",
            m.dim()
        )));
    }
    if m.bands() != ssf.bands() {
        return Err(Error::Shape("manifold and response band counts differ".into()));
    }
    let a = ssf.matrix().matmul(&m.u);
    let apinv = linalg::pinv_full_row_rank(&a)?;
    let n = linalg::null_space_basis(&a)?;
    Ok((apinv, n))
}

/// One member of the RGB-consistent solution set on a >3-dim manifold:
/// coefficients = pinv(P·U)·rgb + N·zeta, spectra = U·coefficients. Every
/// zeta renders back to the same RGB because P·U·N = 0.
pub fn solution_space_sample<S: Scalar>(
    rgb: &HyperCube<S>,
    m: &SyntheticManifold<S>,
    ssf: &SpectralSensitivity<S>,
    zeta: &[S],
) -> Result<HyperCube<S>> {
    if rgb.bands() != 3 {
        return Err(Error::Shape(format!("expected a 3-band RGB cube, got {}", rgb.bands())));
    }
    let (apinv, n) = manifold_camera_parts(m, ssf)?;
    if zeta.len() != n.cols() {
        return Err(Error::Shape(format!(
            "zeta has {} entries, null space has {}",
            zeta.len(),
            n.cols()
        )));
    }
    let lift = m.u.matmul(&apinv);
    let mut data = spectral::lift_bands(rgb.data(), 3, rgb.pixels(), &lift);
    let shift = m.u.matmul(&n).matvec(zeta);
    let npix = rgb.pixels();
    for b in 0..m.bands() {
        for v in &mut data[b * npix..(b + 1) * npix] {
            *v += shift[b];
        }
    }
    HyperCube::new(ssf.wavelengths().to_vec(), rgb.nx(), rgb.ny(), data)
}

/// Per-pixel null coordinates that make the solution set hit a known truth:
/// zeta_p = N^T (U^T truth_p - pinv(P·U)·rgb_p), laid out coordinate-major.
pub fn recover_zeta_field<S: Scalar>(
    truth: &HyperCube<S>,
    m: &SyntheticManifold<S>,
    ssf: &SpectralSensitivity<S>,
) -> Result<Vec<S>> {
    let (apinv, n) = manifold_camera_parts(m, ssf)?;
    if truth.bands() != m.bands() {
        return Err(Error::Shape("cube does not match the manifold bands".into()));
    }
    let npix = truth.pixels();
    let rgb = crate::hsio::synthesize_rgb(truth, ssf)?;
    let c_true = spectral::project_bands(truth.data(), truth.bands(), npix, &m.u);
    let mut resid = spectral::lift_bands(rgb.data(), 3, npix, &apinv);
    for (r, t) in resid.iter_mut().zip(&c_true) {
        *r = *t - *r;
    }
    Ok(spectral::project_bands(&resid, m.dim(), npix, &n))
}

/// Rebuild a cube from RGB plus a per-pixel zeta field (see
/// [`recover_zeta_field`] for the layout).
pub fn member_from_zeta_field<S: Scalar>(
    rgb: &HyperCube<S>,
    m: &SyntheticManifold<S>,
    ssf: &SpectralSensitivity<S>,
    field: &[S],
) -> Result<HyperCube<S>> {
    if rgb.bands() != 3 {
        return Err(Error::Shape(format!("expected a 3-band RGB cube, got {}", rgb.bands())));
    }
    let (apinv, n) = manifold_camera_parts(m, ssf)?;
    let npix = rgb.pixels();
    if field.len() != n.cols() * npix {
        return Err(Error::Shape(format!(
            "zeta field has {} entries, expected {}",
            field.len(),
            n.cols() * npix
        )));
    }
    let lift = m.u.matmul(&apinv);
    let mut data = spectral::lift_bands(rgb.data(), 3, npix, &lift);
    let un = m.u.matmul(&n);
    let null_part = spectral::lift_bands(field, n.cols(), npix, &un);
    for (d, s) in data.iter_mut().zip(null_part) {
        *d += s;
    }
    HyperCube::new(ssf.wavelengths().to_vec(), rgb.nx(), rgb.ny(), data)
}

/// Minimum-norm linear inverse with no learned information: the zeta = 0
/// member of the full solution set, used as the comparison floor.
pub fn pseudo_inverse_baseline<S: Scalar>(
    rgb: &HyperCube<S>,
    ssf: &SpectralSensitivity<S>,
) -> Result<HyperCube<S>> {
    spectral::reconstruct_solution(rgb, None, ssf)
}

/// Low-dimensional Gaussian reference prior for the diffusion machinery.
#[derive(Debug, Clone)]
pub struct GaussianToyPrior<S> {
    mean: Vec<S>,
    cov: Mat<S>,
    sqrt_cov: Mat<S>,
}

impl<S: Scalar> GaussianToyPrior<S> {
    pub fn new(mean: Vec<S>, cov: Mat<S>) -> Result<Self> {
        let d = mean.len();
        if cov.rows() != d || cov.cols() != d || d == 0 {
            return Err(Error::Shape("covariance does not match the mean dimension".into()));
        }
        for i in 0..d {
            for j in 0..d {
                if (cov[(i, j)] - cov[(j, i)]).abs() > S::cst(1e-12) {
                    return Err(Error::Data("covariance must be symmetric".into()));
                }
            }
        }
        let (vals, vecs) = linalg::sym_eig(&cov);
        let floor = -S::cst(1e-10) * vals.iter().fold(S::one(), |a, v| a.max(v.abs()));
        if vals.iter().any(|&v| v < floor) {
            return Err(Error::Data("covariance must be positive semi-definite".into()));
        }
        // Symmetric square root for sampling; negative dust clamps to zero.
        let mut root = Mat::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                let mut acc = S::zero();
                for k in 0..d {
                    acc += vecs[(i, k)] * vals[k].max(S::zero()).sqrt() * vecs[(j, k)];
                }
                root[(i, j)] = acc;
            }
        }
        Ok(GaussianToyPrior { mean, cov, sqrt_cov: root })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[S] {
        &self.mean
    }

    pub fn cov(&self) -> &Mat<S> {
        &self.cov
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<S> {
        let d = self.dim();
        let e: Vec<S> = (0..d)
            .map(|_| S::cst(rng.sample::<f64, _>(rand_distr::StandardNormal)))
            .collect();
        let mut out = self.sqrt_cov.matvec(&e);
        for (o, m) in out.iter_mut().zip(&self.mean) {
            *o += *m;
        }
        out
    }

    /// Law of the corrupted latent at step t: N(sqrt(abar) mu, abar Sigma + (1-abar) I).
    pub fn marginal_at(&self, t: usize, sched: &DiffusionSchedule<S>) -> Result<(Vec<S>, Mat<S>)> {
        let ab = sched.alpha_bar(t)?;
        let sa = ab.sqrt();
        let mean = self.mean.iter().map(|&m| sa * m).collect();
        let d = self.dim();
        let mut cov = Mat::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] = ab * self.cov[(i, j)] + if i == j { S::one() - ab } else { S::zero() };
            }
        }
        Ok((mean, cov))
    }
}

/// Posterior-mean estimate and the noise prediction it implies.
#[derive(Debug, Clone)]
pub struct PosteriorDenoise<S> {
    pub e_z0: Vec<S>,
    pub eps_star: Vec<S>,
}

fn posterior_gain<S: Scalar>(
    prior: &GaussianToyPrior<S>,
    t: usize,
    sched: &DiffusionSchedule<S>,
) -> Result<(S, S, Mat<S>)> {
    if t == 0 {
        return Err(Error::Domain("posterior is defined for steps 1..=T".into()));
    }
    let ab = sched.alpha_bar(t)?;
    let (sa, sn) = (ab.sqrt(), (S::one() - ab).sqrt());
    let d = prior.dim();
    let mut bracket = Mat::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            bracket[(i, j)] = ab * prior.cov[(i, j)]
                + if i == j { S::one() - ab + S::cst(RIDGE) } else { S::zero() };
        }
    }
    // K = sqrt(abar) Sigma bracket^{-1}: the linear gain of the posterior mean.
    let mut k = prior.cov.matmul(&linalg::inverse(&bracket)?);
    for i in 0..d {
        for j in 0..d {
            k[(i, j)] *= sa;
        }
    }
    Ok((sa, sn, k))
}

/// Exact conditional mean of the clean latent given a corrupted one under a
/// Gaussian prior, and the noise prediction consistent with it. The identity
/// z_t = sqrt(abar) E[Z0|z_t] + sqrt(1-abar) eps* holds by construction.
pub fn gaussian_posterior_denoiser<S: Scalar>(
    prior: &GaussianToyPrior<S>,
    z_t: &[S],
    t: usize,
    sched: &DiffusionSchedule<S>,
) -> Result<PosteriorDenoise<S>> {
    if z_t.len() != prior.dim() {
        return Err(Error::Shape("latent does not match the prior dimension".into()));
    }
    let (sa, sn, k) = posterior_gain(prior, t, sched)?;
    let centered: Vec<S> = z_t.iter().zip(prior.mean()).map(|(&z, &m)| z - sa * m).collect();
    let gain = k.matvec(&centered);
    let e_z0: Vec<S> = prior.mean().iter().zip(&gain).map(|(&m, &g)| m + g).collect();
    let eps_star = z_t.iter().zip(&e_z0).map(|(&z, &e)| (z - sa * e) / sn).collect();
    Ok(PosteriorDenoise { e_z0, eps_star })
}

/// Brute-force posterior mean by tensor-grid quadrature on mu +- 6 sigma,
/// 401 points per dimension; supports 1-D and 2-D priors only.
pub fn quadrature_posterior_mean<S: Scalar>(
    prior: &GaussianToyPrior<S>,
    z_t: &[S],
    t: usize,
    sched: &DiffusionSchedule<S>,
) -> Result<Vec<S>> {
    let d = prior.dim();
    if d > 2 {
        return Err(Error::Domain(format!("quadrature supports at most 2 dims, got {d}")));
    }
    if z_t.len() != d {
        return Err(Error::Shape("latent does not match the prior dimension".into()));
    }
    let ab = sched.alpha_bar(t)?;
    if t == 0 {
        return Err(Error::Domain("posterior is defined for steps 1..=T".into()));
    }
    let sa = ab.sqrt();
    let noise_var = S::one() - ab;
    let mut ridged = prior.cov.clone();
    for i in 0..d {
        ridged[(i, i)] += S::cst(RIDGE);
        if !(ridged[(i, i)] > S::zero()) {
            return Err(Error::Domain("degenerate prior direction; quadrature needs spread".into()));
        }
    }
    let prec = linalg::inverse(&ridged)?;
    const POINTS: usize = 401;
    let sigmas: Vec<S> = (0..d).map(|i| ridged[(i, i)].sqrt()).collect();
    let axis = |i: usize, j: usize| {
        let six = S::cst(6.0);
        let span = S::cst(12.0) / S::cst((POINTS - 1) as f64);
        prior.mean[i] - six * sigmas[i] + span * sigmas[i] * S::cst(j as f64)
    };
    // Log-weights first, then a max-shift keeps the exponentials in range.
    let mut pts: Vec<Vec<S>> = Vec::new();
    if d == 1 {
        for j in 0..POINTS {
            pts.push(vec![axis(0, j)]);
        }
    } else {
        for j0 in 0..POINTS {
            for j1 in 0..POINTS {
                pts.push(vec![axis(0, j0), axis(1, j1)]);
            }
        }
    }
    let half = S::cst(0.5);
    let mut logw = Vec::with_capacity(pts.len());
    for z0 in &pts {
        let c: Vec<S> = z0.iter().zip(prior.mean()).map(|(&a, &b)| a - b).collect();
        let quad_prior: S = (0..d)
            .map(|i| (0..d).map(|j| c[i] * prec[(i, j)] * c[j]).sum::<S>())
            .sum();
        let quad_like: S = (0..d)
            .map(|i| {
                let r = z_t[i] - sa * z0[i];
                r * r / noise_var
            })
            .sum();
        logw.push(-half * (quad_prior + quad_like));
    }
    let m = logw.iter().fold(S::neg_infinity(), |a, &v| a.max(v));
    let mut wsum = S::zero();
    let mut acc = vec![S::zero(); d];
    for (z0, &lw) in pts.iter().zip(&logw) {
        let w = (lw - m).exp();
        wsum += w;
        for i in 0..d {
            acc[i] += w * z0[i];
        }
    }
    for v in &mut acc {
        *v /= wsum;
    }
    Ok(acc)
}

/// The analytic noise predictor as a sampler-compatible denoiser; latents are
/// carried as (dim, 1, 1) tensors and the conditioning input is ignored.
pub fn analytic_denoiser<'a, S: Scalar>(
    prior: &'a GaussianToyPrior<S>,
    sched: &'a DiffusionSchedule<S>,
) -> impl Denoiser<S> + 'a {
    move |z_t: &Tensor<S>, _cond: &Tensor<S>, t: usize| {
        let pd = gaussian_posterior_denoiser(prior, z_t.data(), t, sched)?;
        let (c, h, w) = z_t.shape();
        Tensor::new(c, h, w, pd.eps_star)
    }
}

/// Exact output law of the deterministic sampler driven by the analytic
/// denoiser: every update is affine in the latent, so the standard normal
/// start propagates to N(h, G G^T) with (G, h) composed step by step.
pub fn ddim_gaussian_law<S: Scalar>(
    prior: &GaussianToyPrior<S>,
    sched: &DiffusionSchedule<S>,
    steps: usize,
) -> Result<(Vec<S>, Mat<S>)> {
    let taus = sched.ddim_timesteps(steps)?;
    let d = prior.dim();
    let mut g = Mat::identity(d);
    let mut h = vec![S::zero(); d];
    for k in (0..taus.len()).rev() {
        let t = taus[k];
        let (sa, sn, kmat) = posterior_gain(prior, t, sched)?;
        let ab_prev = sched.alpha_bar(if k == 0 { 0 } else { taus[k - 1] })?;
        let (sap, snp) = (ab_prev.sqrt(), (S::one() - ab_prev).sqrt());
        // z' = M z + b with M = sap K + (snp/sn)(I - sa K) and
        // b = (sap - sa snp/sn) (I - sa K) mu.
        let ratio = snp / sn;
        let mut mmat = Mat::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                let eye = if i == j { S::one() } else { S::zero() };
                mmat[(i, j)] = sap * kmat[(i, j)] + ratio * (eye - sa * kmat[(i, j)]);
            }
        }
        let mut mvec = vec![S::zero(); d];
        for i in 0..d {
            let mut acc = S::zero();
            for j in 0..d {
                let eye = if i == j { S::one() } else { S::zero() };
                acc += (eye - sa * kmat[(i, j)]) * prior.mean[j];
            }
            mvec[i] = (sap - sa * ratio) * acc;
        }
        h = mmat.matvec(&h);
        for i in 0..d {
            h[i] += mvec[i];
        }
        g = mmat.matmul(&g);
    }
    let cov = g.matmul(&g.transpose());
    Ok((h, cov))
}

/// Random smooth three-channel camera on a 400-700nm grid, rows normalized
/// to unit sum and already split. Channel peaks are drawn from disjoint
/// wavelength windows so the matrix keeps rank 3 and a mild condition number
/// for every seed.
pub fn random_ssf<S: Scalar>(bands: usize, seed: u64) -> Result<SpectralSensitivity<S>> {
    if bands < 4 {
        return Err(Error::Shape(format!("a camera needs at least 4 bands, got {bands}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = 300.0 / (bands - 1) as f64;
    let wavelengths: Vec<S> = (0..bands).map(|i| S::cst(400.0 + step * i as f64)).collect();
    // Red, green, blue row order; center windows never overlap.
    let windows = [(580.0, 640.0), (510.0, 570.0), (440.0, 500.0)];
    let mut rows: [Vec<S>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (c, (lo, hi)) in windows.iter().enumerate() {
        let center = lo + (hi - lo) * rng.gen::<f64>();
        let width = 25.0 + 30.0 * rng.gen::<f64>();
        let floor = 0.005 + 0.015 * rng.gen::<f64>();
        let row: Vec<f64> = (0..bands)
            .map(|i| {
                let d = (400.0 + step * i as f64 - center) / width;
                (-0.5 * d * d).exp() + floor
            })
            .collect();
        let sum: f64 = row.iter().sum();
        rows[c] = row.into_iter().map(|v| S::cst(v / sum)).collect();
    }
    spectral::split_ssf(SpectralSensitivity::from_rows(wavelengths, rows)?)
}

/// Straight-loop PSNR reference, pixel-major accumulation, no shared code
/// with the metrics module. Shapes must already match; +inf on exact
/// agreement.
pub fn psnr_loop<S: Scalar>(est: &HyperCube<S>, reference: &HyperCube<S>, peak: S) -> S {
    let npix = est.pixels();
    let bands = est.bands();
    let mut acc = S::zero();
    for p in 0..npix {
        for b in 0..bands {
            let d = est.data()[b * npix + p] - reference.data()[b * npix + p];
            acc += d * d;
        }
    }
    let m = acc / S::cst((npix * bands) as f64);
    if m == S::zero() {
        return S::infinity();
    }
    S::cst(10.0) * (peak * peak / m).log10()
}

/// Straight-loop spectral-angle reference in degrees plus the excluded-pixel
/// count. Zero reference spectra are skipped and counted, a zero estimate
/// against a nonzero reference scores 90 degrees, and the cosine is clamped
/// to [-1, 1].
pub fn sam_loop<S: Scalar>(est: &HyperCube<S>, reference: &HyperCube<S>) -> Result<(S, usize)> {
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
        } else if ne == S::zero() {
            acc += S::cst(90.0);
            used += 1;
        } else {
            let c = (dot / (ne.sqrt() * nr.sqrt())).max(-S::one()).min(S::one());
            acc += c.acos() * S::cst(180.0 / std::f64::consts::PI);
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::Domain("spectral angle undefined: every reference pixel is zero".into()));
    }
    Ok((acc / S::cst(used as f64), excluded))
}

/// Straight-loop SSIM reference with all constants restated literally and
/// the window weights kept unnormalized until use. Same pinned definition as
/// the metric, different arithmetic route.
pub fn ssim_loop<S: Scalar>(est: &HyperCube<S>, reference: &HyperCube<S>) -> Result<S> {
    const WIN: usize = 11;
    let (nx, ny) = (est.nx(), est.ny());
    if nx < WIN || ny < WIN {
        return Err(Error::Shape(format!("SSIM reference needs {WIN}x{WIN} pixels, got {nx}x{ny}")));
    }
    let mut w = [[0.0f64; WIN]; WIN];
    let mut wsum = 0.0;
    for (j, wrow) in w.iter_mut().enumerate() {
        for (i, wv) in wrow.iter_mut().enumerate() {
            let dx = i as f64 - 5.0;
            let dy = j as f64 - 5.0;
            // sigma = 1.5, so 2 sigma^2 = 4.5.
            *wv = (-(dx * dx + dy * dy) / 4.5).exp();
            wsum += *wv;
        }
    }
    let wn = S::cst(wsum);
    let c1 = S::cst(0.01 * 0.01);
    let c2 = S::cst(0.03 * 0.03);
    let npix = est.pixels();
    let mut total = S::zero();
    let mut nwin = 0usize;
    for b in 0..est.bands() {
        for y0 in 0..=(ny - WIN) {
            for x0 in 0..=(nx - WIN) {
                let mut sx = S::zero();
                let mut sy = S::zero();
                let mut sxx = S::zero();
                let mut syy = S::zero();
                let mut sxy = S::zero();
                for j in 0..WIN {
                    for i in 0..WIN {
                        let wv = S::cst(w[j][i]);
                        let p = (y0 + j) * nx + (x0 + i);
                        let a = est.data()[b * npix + p];
                        let r = reference.data()[b * npix + p];
                        sx += wv * a;
                        sy += wv * r;
                        sxx += wv * a * a;
                        syy += wv * r * r;
                        sxy += wv * a * r;
                    }
                }
                let mx = sx / wn;
                let my = sy / wn;
                let vx = sxx / wn - mx * mx;
                let vy = syy / wn - my * my;
                let cxy = sxy / wn - mx * my;
                let two = S::cst(2.0);
                total += ((two * mx * my + c1) * (two * cxy + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                nwin += 1;
            }
        }
    }
    Ok(total / S::cst(nwin as f64))
}
