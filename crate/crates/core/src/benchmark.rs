//! Synthetic end-to-end benchmark: scenes drawn from a small mixture of
//! low-dimensional spectral manifolds, rendered through a smooth three-bump
//! camera. Cubes carry substantially more camera-invisible content than the
//! reference sampler produces, so learned reconstruction has real headroom
//! over the minimum-norm inverse.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::hsio::{synthesize_rgb, HyperCube};
use crate::linalg::Mat;
use crate::oracle::{smooth_field, SyntheticManifold};
use crate::spectral::{split_ssf, SpectralSensitivity};
use crate::{Error, Result, Scalar};

/// Band count of the benchmark grid.
pub const BANDS: usize = 31;

/// 400..700 nm in 10 nm steps.
pub fn standard_wavelengths<S: Scalar>() -> Vec<S> {
    (0..BANDS).map(|i| S::cst(400.0 + 10.0 * i as f64)).collect()
}

/// Smooth three-channel camera: Gaussian bumps centered in the blue, green,
/// and red thirds of the grid, each row normalized to unit sum so a flat
/// unit spectrum renders as white (1, 1, 1). Returned with the null-space
/// split already computed.
pub fn gaussian_bump_ssf<S: Scalar>(wavelengths: &[S]) -> Result<SpectralSensitivity<S>> {
    let b = wavelengths.len();
    if b < 4 {
        return Err(Error::Shape(format!("camera needs at least 4 bands, got {b}")));
    }
    let centers = [460.0, 545.0, 615.0];
    let widths = [38.0, 42.0, 46.0];
    let mut p = Mat::zeros(3, b);
    for c in 0..3 {
        let mut row_sum = 0.0;
        let mut row = vec![0.0f64; b];
        for (bi, w) in wavelengths.iter().enumerate() {
            let x = (w.f64() - centers[c]) / widths[c];
            row[bi] = (-x * x).exp();
            row_sum += row[bi];
        }
        for bi in 0..b {
            p[(c, bi)] = S::cst(row[bi] / row_sum);
        }
    }
    split_ssf(SpectralSensitivity::from_matrix(wavelengths.to_vec(), p)?)
}

/// Shape of the synthetic dataset.
#[derive(Debug, Clone)]
pub struct MixtureSpec {
    pub nx: usize,
    pub ny: usize,
    pub dims: Vec<usize>,
    pub train: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        MixtureSpec { nx: 64, ny: 64, dims: vec![3, 4, 5, 6], train: 200, test: 20, seed: 0 }
    }
}

/// Generated dataset: camera, generating manifolds, and (cube, render) pairs.
pub struct Benchmark<S> {
    pub ssf: SpectralSensitivity<S>,
    pub manifolds: Vec<SyntheticManifold<S>>,
    pub train: Vec<(HyperCube<S>, HyperCube<S>)>,
    pub test: Vec<(HyperCube<S>, HyperCube<S>)>,
    /// Index into `manifolds` for each test cube, in order.
    pub test_manifold: Vec<usize>,
}

/// Draw one scene on the manifold with as much fluctuation around the lead
/// profile as positivity allows: the amplitude starts aggressive and halves
/// until every entry is positive, then a single multiplicative rescale puts
/// the cube in (0, 0.95]. Both operations preserve span membership exactly.
pub fn sample_mixture_cube<S: Scalar>(
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
    let (b, l) = (m.bands(), m.dim());
    let npix = nx * ny;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = S::cst(0.5);
    let lead_field = smooth_field::<S>(nx, ny, &mut rng);
    let fluct_fields: Vec<Vec<S>> =
        (1..l).map(|_| smooth_field::<S>(nx, ny, &mut rng)).collect();
    // Lead part: c1 in [1, 2] times the positive profile.
    let mut lead = vec![S::zero(); b * npix];
    for bi in 0..b {
        let u = m.basis()[(bi, 0)];
        for p in 0..npix {
            let c1 = S::one() + (half + half * lead_field[p]);
            lead[bi * npix + p] = u * c1;
        }
    }
    // Fluctuation part at unit amplitude.
    let mut fluct = vec![S::zero(); b * npix];
    for (k, field) in fluct_fields.iter().enumerate() {
        for bi in 0..b {
            let u = m.basis()[(bi, k + 1)];
            for p in 0..npix {
                fluct[bi * npix + p] += u * field[p];
            }
        }
    }
    let u1min = (0..b).map(|bi| m.basis()[(bi, 0)]).fold(S::infinity(), S::min);
    let mut amp = S::cst(0.35) * u1min;
    let mut data = vec![S::zero(); b * npix];
    loop {
        let mut min = S::infinity();
        for i in 0..b * npix {
            data[i] = lead[i] + amp * fluct[i];
            min = min.min(data[i]);
        }
        if min > S::zero() || l == 1 {
            break;
        }
        amp *= half;
    }
    let max = data.iter().copied().fold(S::zero(), S::max);
    let scale = S::cst(0.95) / max;
    for v in &mut data {
        *v *= scale;
    }
    // Unused draw keeps cube seeds decoupled from any later consumer of the
    // same stream.
    let _: f64 = rng.gen();
    HyperCube::new(wavelengths, nx, ny, data)
}

/// Build the full dataset: one manifold per entry of `dims`, cubes assigned
/// round-robin so every split covers every manifold.
pub fn generate<S: Scalar>(spec: &MixtureSpec) -> Result<Benchmark<S>> {
    if spec.dims.is_empty() {
        return Err(Error::Config("mixture needs at least one manifold".into()));
    }
    if spec.train == 0 || spec.test == 0 {
        return Err(Error::Config("both splits need at least one cube".into()));
    }
    if spec.nx == 0 || spec.ny == 0 {
        return Err(Error::Config("cube extent must be positive".into()));
    }
    let wl = standard_wavelengths::<S>();
    let ssf = gaussian_bump_ssf(&wl)?;
    let manifolds: Vec<SyntheticManifold<S>> = spec
        .dims
        .iter()
        .enumerate()
        .map(|(i, &d)| SyntheticManifold::new(BANDS, d, spec.seed.wrapping_add(1000 + i as u64)))
        .collect::<Result<_>>()?;
    let pair = |idx: u64, k: usize| -> Result<(HyperCube<S>, HyperCube<S>)> {
        let cube = sample_mixture_cube(
            &manifolds[k],
            wl.clone(),
            spec.nx,
            spec.ny,
            spec.seed.wrapping_mul(0x9e37_79b9).wrapping_add(idx),
        )?;
        let rgb = synthesize_rgb(&cube, &ssf)?;
        Ok((cube, rgb))
    };
    let mut train = Vec::with_capacity(spec.train);
    for i in 0..spec.train {
        train.push(pair(i as u64, i % manifolds.len())?);
    }
    let mut test = Vec::with_capacity(spec.test);
    let mut test_manifold = Vec::with_capacity(spec.test);
    for i in 0..spec.test {
        let k = i % manifolds.len();
        test.push(pair((spec.train + i) as u64, k)?);
        test_manifold.push(k);
    }
    Ok(Benchmark { ssf, manifolds, train, test, test_manifold })
}
