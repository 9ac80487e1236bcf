//! Hyperspectral image I/O and geometry: the in-memory cube type, the HSC1
//! binary container, CSV loaders for camera response curves and illuminant
//! power tables, RGB synthesis through a response matrix, and deterministic
//! patch extraction with optional dihedral augmentation.
//!
//! Layout convention: band-sequential, each band stored row-major, i.e. the
//! voxel (b, x, y) lives at index `b*nx*ny + y*nx + x`.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::spectral::SpectralSensitivity;
use crate::{Error, Result, Scalar};

const HSC1_MAGIC: &[u8; 4] = b"HSC1";

/// Load-time grace for values that rounded just past the nominal range when a
/// file was written with a non-unit scale.
const RANGE_EPS: f64 = 1e-6;

/// A hyperspectral cube, also used degenerately for 3-band RGB renders and
/// other per-pixel channel stacks.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperCube<S> {
    bands: usize,
    nx: usize,
    ny: usize,
    wavelengths: Vec<S>,
    /// Physical peak the stored payload was normalized by; metadata only.
    scale: f64,
    data: Vec<S>,
}

impl<S: Scalar> HyperCube<S> {
    /// Build a cube from parts, enforcing the shape and wavelength invariants.
    /// Values must be finite; the [0, 1] range is enforced at file I/O, not
    /// here, because intermediate renders and features may legitimately leave
    /// the nominal range in memory.
    pub fn new(wavelengths: Vec<S>, nx: usize, ny: usize, data: Vec<S>) -> Result<Self> {
        let bands = wavelengths.len();
        if bands == 0 || nx == 0 || ny == 0 {
            return Err(Error::Shape(format!("empty cube ({bands} bands, {nx}x{ny})")));
        }
        if data.len() != bands * nx * ny {
            return Err(Error::Shape(format!(
                "data length {} != {} bands x {} x {}",
                data.len(),
                bands,
                nx,
                ny
            )));
        }
        validate_wavelengths(&wavelengths)?;
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Data("cube contains non-finite values".into()));
        }
        Ok(HyperCube { bands, nx, ny, wavelengths, scale: 1.0, data })
    }

    /// Standard 31-band grid: 400..700 nm in 10 nm steps.
    pub fn standard_wavelengths() -> Vec<S> {
        (0..31).map(|i| S::cst(400.0 + 10.0 * i as f64)).collect()
    }

    /// A 3-band cube on the placeholder channel grid used for RGB renders and
    /// compressed features.
    pub fn rgb(nx: usize, ny: usize, data: Vec<S>) -> Result<Self> {
        let wl = vec![S::zero(), S::one(), S::cst(2.0)];
        HyperCube::new(wl, nx, ny, data)
    }

    pub fn zeros(wavelengths: Vec<S>, nx: usize, ny: usize) -> Result<Self> {
        let n = wavelengths.len() * nx * ny;
        HyperCube::new(wavelengths, nx, ny, vec![S::zero(); n])
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn pixels(&self) -> usize {
        self.nx * self.ny
    }

    pub fn wavelengths(&self) -> &[S] {
        &self.wavelengths
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    #[inline]
    pub fn idx(&self, b: usize, x: usize, y: usize) -> usize {
        b * self.nx * self.ny + y * self.nx + x
    }

    #[inline]
    pub fn get(&self, b: usize, x: usize, y: usize) -> S {
        self.data[self.idx(b, x, y)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, x: usize, y: usize, v: S) {
        let i = self.idx(b, x, y);
        self.data[i] = v;
    }

    /// One band as a contiguous row-major slice.
    pub fn band(&self, b: usize) -> &[S] {
        &self.data[b * self.nx * self.ny..(b + 1) * self.nx * self.ny]
    }

    /// The spectrum at pixel (x, y).
    pub fn spectrum(&self, x: usize, y: usize) -> Vec<S> {
        (0..self.bands).map(|b| self.get(b, x, y)).collect()
    }

    pub fn same_grid(&self, other: &HyperCube<S>) -> bool {
        self.bands == other.bands
            && self.nx == other.nx
            && self.ny == other.ny
            && self
                .wavelengths
                .iter()
                .zip(&other.wavelengths)
                .all(|(a, b)| *a == *b)
    }

    /// Clamp every value into [0, 1]; used right before export.
    pub fn clamped_unit(&self) -> HyperCube<S> {
        let mut out = self.clone();
        for v in &mut out.data {
            *v = v.max(S::zero()).min(S::one());
        }
        out
    }

    /// Map every value through `f`, keeping geometry.
    pub fn map(&self, f: impl Fn(S) -> S) -> HyperCube<S> {
        let mut out = self.clone();
        for v in &mut out.data {
            *v = f(*v);
        }
        out
    }

    /// View as a network tensor: channels = bands, h = ny, w = nx. The two
    /// layouts are element-for-element identical.
    pub fn to_tensor(&self) -> crate::nn::Tensor<S> {
        crate::nn::Tensor::new(self.bands, self.ny, self.nx, self.data.clone())
            .expect("cube layout matches tensor layout")
    }

    /// Inverse of [`to_tensor`]; wavelength count must equal the channel
    /// count.
    pub fn from_tensor(wavelengths: Vec<S>, t: &crate::nn::Tensor<S>) -> Result<Self> {
        let (c, h, w) = t.shape();
        if wavelengths.len() != c {
            return Err(Error::Shape(format!(
                "{} wavelengths for a {c}-channel tensor",
                wavelengths.len()
            )));
        }
        HyperCube::new(wavelengths, w, h, t.data().to_vec())
    }
}

fn validate_wavelengths<S: Scalar>(wl: &[S]) -> Result<()> {
    if !wl.iter().all(|v| v.is_finite()) {
        return Err(Error::Data("non-finite wavelength".into()));
    }
    for w in wl.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::Data("wavelengths must be strictly increasing".into()));
        }
    }
    Ok(())
}

fn read_exact_or_fmt(r: &mut impl Read, buf: &mut [u8], path: &str, what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::file_format(path, format!("truncated file while reading {what}")))
}

/// Load an HSC1 cube: magic, LE u32 bands/nx/ny, f64 scale, f32 wavelengths,
/// f32 band-sequential payload. Stored values are payload/scale and must land
/// in [0, 1].
pub fn load_hsi<S: Scalar>(path: impl AsRef<Path>) -> Result<HyperCube<S>> {
    let path = path.as_ref();
    let pstr = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|e| Error::io(&pstr, e))?;
    load_hsi_bytes(&bytes, &pstr)
}

pub fn load_hsi_bytes<S: Scalar>(bytes: &[u8], origin: &str) -> Result<HyperCube<S>> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    read_exact_or_fmt(&mut r, &mut magic, origin, "magic")?;
    if &magic != HSC1_MAGIC {
        return Err(Error::file_format(origin, "bad magic, not an HSC1 file"));
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |r: &mut &[u8], what: &str| -> Result<u32> {
        read_exact_or_fmt(r, &mut u32buf, origin, what)?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let bands = read_u32(&mut r, "band count")? as usize;
    let nx = read_u32(&mut r, "width")? as usize;
    let ny = read_u32(&mut r, "height")? as usize;
    if bands == 0 || nx == 0 || ny == 0 {
        return Err(Error::file_format(origin, "zero-sized dimension in header"));
    }
    let voxels = bands
        .checked_mul(nx)
        .and_then(|v| v.checked_mul(ny))
        .filter(|&v| v <= (1 << 31))
        .ok_or_else(|| Error::file_format(origin, "implausibly large dimensions"))?;
    let mut f64buf = [0u8; 8];
    read_exact_or_fmt(&mut r, &mut f64buf, origin, "scale")?;
    let scale = f64::from_le_bytes(f64buf);
    if !scale.is_finite() || scale <= 0.0 {
        return Err(Error::file_format(origin, "scale must be finite and positive"));
    }
    let mut f32buf = [0u8; 4];
    let mut wavelengths = Vec::with_capacity(bands);
    for _ in 0..bands {
        read_exact_or_fmt(&mut r, &mut f32buf, origin, "wavelengths")?;
        wavelengths.push(S::cst(f32::from_le_bytes(f32buf) as f64));
    }
    validate_wavelengths(&wavelengths).map_err(|e| Error::file_format(origin, e.to_string()))?;
    let mut data = Vec::with_capacity(voxels);
    for _ in 0..voxels {
        read_exact_or_fmt(&mut r, &mut f32buf, origin, "payload")?;
        let raw = f32::from_le_bytes(f32buf) as f64;
        let v = raw / scale;
        if !v.is_finite() {
            return Err(Error::file_format(origin, "non-finite value in payload"));
        }
        if v < -RANGE_EPS || v > 1.0 + RANGE_EPS {
            return Err(Error::file_format(
                origin,
                format!("value {v} outside [0, 1] after applying scale"),
            ));
        }
        data.push(S::cst(v.clamp(0.0, 1.0)));
    }
    if !r.is_empty() {
        return Err(Error::file_format(origin, format!("{} trailing bytes", r.len())));
    }
    let mut cube = HyperCube::new(wavelengths, nx, ny, data)
        .map_err(|e| Error::file_format(origin, e.to_string()))?;
    cube.scale = scale;
    Ok(cube)
}

/// Save a cube as HSC1. Values must already be in [0, 1]; the stored payload
/// is value*scale in f32, which round-trips byte-exactly through `load_hsi`.
pub fn save_hsi<S: Scalar>(cube: &HyperCube<S>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let pstr = path.display().to_string();
    let bytes = save_hsi_bytes(cube)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(&pstr, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&pstr, e))?;
    Ok(())
}

pub fn save_hsi_bytes<S: Scalar>(cube: &HyperCube<S>) -> Result<Vec<u8>> {
    for v in &cube.data {
        let v = v.f64();
        if !(-RANGE_EPS..=1.0 + RANGE_EPS).contains(&v) {
            return Err(Error::Data(format!("value {v} outside [0, 1]; clamp before saving")));
        }
    }
    let mut out = Vec::with_capacity(16 + 4 * (cube.bands + cube.data.len()));
    out.extend_from_slice(HSC1_MAGIC);
    out.extend_from_slice(&(cube.bands as u32).to_le_bytes());
    out.extend_from_slice(&(cube.nx as u32).to_le_bytes());
    out.extend_from_slice(&(cube.ny as u32).to_le_bytes());
    out.extend_from_slice(&cube.scale.to_le_bytes());
    for w in &cube.wavelengths {
        out.extend_from_slice(&(w.f64() as f32).to_le_bytes());
    }
    for v in &cube.data {
        out.extend_from_slice(&((v.f64() * cube.scale) as f32).to_le_bytes());
    }
    Ok(out)
}

/// Relative spectral power of an illuminant on a wavelength grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Illuminant<S> {
    pub wavelengths: Vec<S>,
    pub power: Vec<S>,
}

impl<S: Scalar> Illuminant<S> {
    pub fn new(wavelengths: Vec<S>, power: Vec<S>) -> Result<Self> {
        if wavelengths.len() != power.len() || wavelengths.is_empty() {
            return Err(Error::Shape("illuminant grid and power lengths differ or empty".into()));
        }
        validate_wavelengths(&wavelengths)?;
        if !power.iter().all(|p| p.is_finite() && *p >= S::zero()) {
            return Err(Error::Data("illuminant power must be finite and non-negative".into()));
        }
        if power.iter().all(|p| *p == S::zero()) {
            return Err(Error::Data("illuminant power is identically zero".into()));
        }
        Ok(Illuminant { wavelengths, power })
    }

    pub fn bands(&self) -> usize {
        self.power.len()
    }

    pub fn max_power(&self) -> S {
        self.power.iter().copied().fold(S::zero(), S::max)
    }
}

fn parse_field<S: Scalar>(raw: &str, path: &str, line: usize) -> Result<S> {
    let v: f64 = raw
        .trim()
        .parse()
        .map_err(|_| Error::file_format(path, format!("non-numeric field {raw:?} on line {line}")))?;
    if !v.is_finite() {
        return Err(Error::file_format(path, format!("non-finite value on line {line}")));
    }
    Ok(S::cst(v))
}

fn csv_records(path: &str, header: &[&str]) -> Result<Vec<Vec<String>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::file_format(path, e.to_string()))?;
    let got: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::file_format(path, e.to_string()))?
        .iter()
        .map(|h| h.to_ascii_lowercase())
        .collect();
    if got != header {
        return Err(Error::file_format(
            path,
            format!("expected header {:?}, found {:?}", header.join(","), got.join(",")),
        ));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::file_format(path, e.to_string()))?;
        rows.push(rec.iter().map(|s| s.to_string()).collect());
    }
    if rows.is_empty() {
        return Err(Error::file_format(path, "no data rows"));
    }
    Ok(rows)
}

/// Load a camera response from CSV with header `wavelength,r,g,b`.
/// The returned sensitivity is unsplit; run it through
/// [`crate::spectral::split_ssf`] before any subspace work.
pub fn load_ssf_csv<S: Scalar>(path: impl AsRef<Path>) -> Result<SpectralSensitivity<S>> {
    let pstr = path.as_ref().display().to_string();
    let rows = csv_records(&pstr, &["wavelength", "r", "g", "b"])?;
    let mut wavelengths = Vec::with_capacity(rows.len());
    let mut chans: [Vec<S>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (i, row) in rows.iter().enumerate() {
        if row.len() != 4 {
            return Err(Error::file_format(&pstr, format!("line {}: expected 4 fields", i + 2)));
        }
        wavelengths.push(parse_field(&row[0], &pstr, i + 2)?);
        for c in 0..3 {
            chans[c].push(parse_field(&row[c + 1], &pstr, i + 2)?);
        }
    }
    validate_wavelengths(&wavelengths).map_err(|e| Error::file_format(&pstr, e.to_string()))?;
    SpectralSensitivity::from_rows(wavelengths, chans)
}

/// Write a camera response as CSV with header `wavelength,r,g,b`, the layout
/// [`load_ssf_csv`] reads. Values print as shortest round-trip decimals, so
/// a save/load cycle is bit-exact.
pub fn save_ssf_csv<S: Scalar>(
    ssf: &crate::spectral::SpectralSensitivity<S>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("wavelength,r,g,b\n");
    let p = ssf.matrix();
    for (bi, w) in ssf.wavelengths().iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{}\n",
            w.f64(),
            p[(0, bi)].f64(),
            p[(1, bi)].f64(),
            p[(2, bi)].f64()
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Load an illuminant from CSV with header `wavelength,power`.
pub fn load_illuminant_csv<S: Scalar>(path: impl AsRef<Path>) -> Result<Illuminant<S>> {
    let pstr = path.as_ref().display().to_string();
    let rows = csv_records(&pstr, &["wavelength", "power"])?;
    let mut wavelengths = Vec::with_capacity(rows.len());
    let mut power = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        if row.len() != 2 {
            return Err(Error::file_format(&pstr, format!("line {}: expected 2 fields", i + 2)));
        }
        wavelengths.push(parse_field(&row[0], &pstr, i + 2)?);
        power.push(parse_field(&row[1], &pstr, i + 2)?);
    }
    Illuminant::new(wavelengths, power)
}

/// Render a cube to RGB through the camera response:
/// `out[c, x, y] = sum_b P[c, b] * hsi[b, x, y]`.
pub fn synthesize_rgb<S: Scalar>(
    hsi: &HyperCube<S>,
    ssf: &SpectralSensitivity<S>,
) -> Result<HyperCube<S>> {
    let p = ssf.matrix();
    if p.cols() != hsi.bands() {
        return Err(Error::Shape(format!(
            "response has {} bands, cube has {}",
            p.cols(),
            hsi.bands()
        )));
    }
    let npix = hsi.pixels();
    let mut data = vec![S::zero(); 3 * npix];
    for c in 0..3 {
        let out_band = &mut data[c * npix..(c + 1) * npix];
        for b in 0..hsi.bands() {
            let w = p[(c, b)];
            if w == S::zero() {
                continue;
            }
            let in_band = hsi.band(b);
            for (o, &v) in out_band.iter_mut().zip(in_band) {
                *o += w * v;
            }
        }
    }
    HyperCube::rgb(hsi.nx(), hsi.ny(), data)
}

/// Square patch extraction grid with optional dihedral augmentation.
#[derive(Debug, Clone, Copy)]
pub struct PatchSpec {
    pub size: usize,
    pub stride: usize,
    pub augment: bool,
}

impl PatchSpec {
    pub fn new(size: usize, stride: usize, augment: bool) -> Result<Self> {
        if size == 0 || stride == 0 {
            return Err(Error::Config("patch size and stride must be positive".into()));
        }
        Ok(PatchSpec { size, stride, augment })
    }
}

/// Deterministic patch list: origins scan top-to-bottom, left-to-right; with
/// augmentation on, each patch gets a seeded rotation (0/90/180/270 degrees)
/// and an independent horizontal flip.
pub fn iter_patches<S: Scalar>(
    cube: &HyperCube<S>,
    spec: PatchSpec,
    seed: u64,
) -> Result<Vec<HyperCube<S>>> {
    if spec.size > cube.nx() || spec.size > cube.ny() {
        return Err(Error::Shape(format!(
            "patch size {} exceeds image {}x{}",
            spec.size,
            cube.nx(),
            cube.ny()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ys: Vec<usize> = (0..=(cube.ny() - spec.size)).step_by(spec.stride).collect();
    let xs: Vec<usize> = (0..=(cube.nx() - spec.size)).step_by(spec.stride).collect();
    let mut out = Vec::with_capacity(xs.len() * ys.len());
    for &oy in &ys {
        for &ox in &xs {
            let mut patch = crop(cube, ox, oy, spec.size)?;
            if spec.augment {
                let quarter_turns = rng.gen_range(0u8..4);
                let flip = rng.gen_bool(0.5);
                patch = dihedral(&patch, quarter_turns, flip);
            }
            out.push(patch);
        }
    }
    Ok(out)
}

pub fn crop<S: Scalar>(cube: &HyperCube<S>, ox: usize, oy: usize, size: usize) -> Result<HyperCube<S>> {
    if ox + size > cube.nx() || oy + size > cube.ny() {
        return Err(Error::Shape("crop outside image".into()));
    }
    let mut data = Vec::with_capacity(cube.bands() * size * size);
    for b in 0..cube.bands() {
        for y in 0..size {
            for x in 0..size {
                data.push(cube.get(b, ox + x, oy + y));
            }
        }
    }
    HyperCube::new(cube.wavelengths().to_vec(), size, size, data)
}

/// Rotate a square cube by `quarter_turns` * 90 degrees counter-clockwise,
/// then flip horizontally if asked.
pub fn dihedral<S: Scalar>(cube: &HyperCube<S>, quarter_turns: u8, flip: bool) -> HyperCube<S> {
    assert_eq!(cube.nx(), cube.ny(), "dihedral transforms need square patches");
    let n = cube.nx();
    let mut out = cube.clone();
    for b in 0..cube.bands() {
        for y in 0..n {
            for x in 0..n {
                let (mut sx, mut sy) = (x, y);
                for _ in 0..(quarter_turns % 4) {
                    let (rx, ry) = (sy, n - 1 - sx);
                    sx = rx;
                    sy = ry;
                }
                if flip {
                    sx = n - 1 - sx;
                }
                out.set(b, x, y, cube.get(b, sx, sy));
            }
        }
    }
    out
}

/// Gamma-encode a 3-band cube into interleaved 8-bit sRGB-like rows for
/// preview export. Values are clamped to [0, 1] first.
pub fn to_srgb8<S: Scalar>(rgb: &HyperCube<S>) -> Result<Vec<u8>> {
    if rgb.bands() != 3 {
        return Err(Error::Shape(format!("preview needs a 3-band cube, got {}", rgb.bands())));
    }
    let (nx, ny) = (rgb.nx(), rgb.ny());
    let mut out = Vec::with_capacity(3 * nx * ny);
    for y in 0..ny {
        for x in 0..nx {
            for c in 0..3 {
                let v = rgb.get(c, x, y).f64().clamp(0.0, 1.0);
                out.push((v.powf(1.0 / 2.2) * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Mat;
    use crate::spectral::{split_ssf, SpectralSensitivity};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_cube(bands: usize, nx: usize, ny: usize, seed: u64) -> HyperCube<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let wl: Vec<f64> = (0..bands).map(|i| 400.0 + 10.0 * i as f64).collect();
        let data: Vec<f64> = (0..bands * nx * ny).map(|_| rng.gen_range(0.0..1.0)).collect();
        HyperCube::new(wl, nx, ny, data).unwrap()
    }

    fn identity_ssf(bands: usize) -> SpectralSensitivity<f64> {
        let mut p = Mat::zeros(3, bands);
        for c in 0..3 {
            p[(c, c)] = 1.0;
        }
        let wl: Vec<f64> = (0..bands).map(|i| 400.0 + 10.0 * i as f64).collect();
        SpectralSensitivity::from_matrix(wl, p).unwrap()
    }

    #[test]
    fn zero_cube_roundtrip() {
        let wl = HyperCube::<f64>::standard_wavelengths();
        let cube = HyperCube::zeros(wl, 4, 4).unwrap();
        assert_eq!(cube.bands(), 31);
        let bytes = save_hsi_bytes(&cube).unwrap();
        let back: HyperCube<f64> = load_hsi_bytes(&bytes, "mem").unwrap();
        assert!(back.data().iter().all(|&v| v == 0.0));
        assert_eq!(back.wavelengths()[0], 400.0);
        assert_eq!(back.wavelengths()[30], 700.0);
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let cube = small_cube(5, 6, 7, 3);
        let bytes = save_hsi_bytes(&cube).unwrap();
        let back: HyperCube<f64> = load_hsi_bytes(&bytes, "mem").unwrap();
        let bytes2 = save_hsi_bytes(&back).unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cube.hsc");
        let cube = small_cube(31, 8, 5, 11);
        save_hsi(&cube, &path).unwrap();
        let back: HyperCube<f64> = load_hsi(&path).unwrap();
        assert_eq!(back.bands(), 31);
        assert_eq!((back.nx(), back.ny()), (8, 5));
        // f32 storage: equal after one round of f32 quantization.
        for (a, b) in cube.data().iter().zip(back.data()) {
            assert_eq!(*a as f32, *b as f32);
        }
    }

    #[test]
    fn load_rejects_bad_magic() {
        let cube = small_cube(3, 2, 2, 1);
        let mut bytes = save_hsi_bytes(&cube).unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            load_hsi_bytes::<f64>(&bytes, "mem"),
            Err(Error::FileFormat { .. })
        ));
    }

    #[test]
    fn load_rejects_truncation_and_trailing() {
        let cube = small_cube(3, 2, 2, 1);
        let bytes = save_hsi_bytes(&cube).unwrap();
        assert!(load_hsi_bytes::<f64>(&bytes[..bytes.len() - 2], "mem").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(load_hsi_bytes::<f64>(&extra, "mem").is_err());
    }

    #[test]
    fn load_rejects_out_of_range_values() {
        let cube = small_cube(2, 2, 2, 1);
        let mut bytes = save_hsi_bytes(&cube).unwrap();
        let off = bytes.len() - 4;
        bytes[off..].copy_from_slice(&2.5f32.to_le_bytes());
        assert!(load_hsi_bytes::<f64>(&bytes, "mem").is_err());
    }

    #[test]
    fn load_rejects_nonincreasing_wavelengths() {
        let cube = small_cube(3, 2, 2, 1);
        let mut bytes = save_hsi_bytes(&cube).unwrap();
        // Wavelengths start at byte 24; make the second equal to the first.
        let w0 = &bytes[24..28].to_vec();
        bytes[28..32].copy_from_slice(w0);
        assert!(load_hsi_bytes::<f64>(&bytes, "mem").is_err());
    }

    #[test]
    fn constructor_rejects_nonfinite() {
        let wl = vec![400.0, 410.0];
        let data = vec![0.0, f64::NAN, 0.0, 0.0];
        assert!(HyperCube::new(wl, 2, 1, data).is_err());
    }

    #[test]
    fn synthesize_rgb_identity_rows_select_bands() {
        let cube = small_cube(8, 4, 3, 5);
        let ssf = identity_ssf(8);
        let rgb = synthesize_rgb(&cube, &ssf).unwrap();
        for c in 0..3 {
            assert_eq!(rgb.band(c), cube.band(c));
        }
    }

    #[test]
    fn synthesize_rgb_matches_triple_loop_oracle() {
        let cube = small_cube(9, 5, 4, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let p = Mat::from_vec(3, 9, (0..27).map(|_| rng.gen_range(0.0..0.3)).collect());
        let wl: Vec<f64> = (0..9).map(|i| 400.0 + 10.0 * i as f64).collect();
        let ssf = SpectralSensitivity::from_matrix(wl, p.clone()).unwrap();
        let rgb = synthesize_rgb(&cube, &ssf).unwrap();
        for x in 0..5 {
            for y in 0..4 {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for b in 0..9 {
                        acc += p[(c, b)] * cube.get(b, x, y);
                    }
                    assert!((rgb.get(c, x, y) - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn synthesize_rgb_zero_cube_is_zero() {
        let wl: Vec<f64> = (0..6).map(|i| 400.0 + 10.0 * i as f64).collect();
        let cube = HyperCube::zeros(wl, 3, 3).unwrap();
        let ssf = identity_ssf(6);
        let rgb = synthesize_rgb(&cube, &ssf).unwrap();
        assert!(rgb.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn synthesize_rgb_band_mismatch_errors() {
        let cube = small_cube(8, 2, 2, 1);
        let ssf = identity_ssf(9);
        assert!(synthesize_rgb(&cube, &ssf).is_err());
    }

    #[test]
    fn patch_counts_match_grid() {
        let cube = small_cube(3, 128, 128, 2);
        let spec = PatchSpec::new(128, 64, false).unwrap();
        assert_eq!(iter_patches(&cube, spec, 0).unwrap().len(), 1);
        let cube = small_cube(3, 256, 256, 2);
        assert_eq!(iter_patches(&cube, spec, 0).unwrap().len(), 9);
    }

    #[test]
    fn patches_deterministic_for_seed() {
        let cube = small_cube(4, 32, 32, 9);
        let spec = PatchSpec::new(16, 8, true).unwrap();
        let a = iter_patches(&cube, spec, 77).unwrap();
        let b = iter_patches(&cube, spec, 77).unwrap();
        assert_eq!(a.len(), b.len());
        for (pa, pb) in a.iter().zip(&b) {
            assert_eq!(pa.data(), pb.data());
        }
        let c = iter_patches(&cube, spec, 78).unwrap();
        assert!(a.iter().zip(&c).any(|(pa, pc)| pa.data() != pc.data()));
    }

    #[test]
    fn oversized_patch_errors() {
        let cube = small_cube(3, 8, 8, 1);
        let spec = PatchSpec::new(16, 8, false).unwrap();
        assert!(iter_patches(&cube, spec, 0).is_err());
    }

    #[test]
    fn dihedral_rotation_composes_to_identity() {
        let cube = small_cube(2, 6, 6, 4);
        let r = dihedral(&cube, 4, false);
        assert_eq!(r.data(), cube.data());
        let f = dihedral(&dihedral(&cube, 0, true), 0, true);
        assert_eq!(f.data(), cube.data());
    }

    #[test]
    fn ssf_csv_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("ssf.csv");
        std::fs::write(&good, "wavelength,r,g,b\n400,0.1,0.2,0.3\n410,0.4,0.5,0.6\n420,0.7,0.8,0.9\n430,0.05,0.1,0.15\n").unwrap();
        let ssf: SpectralSensitivity<f64> = load_ssf_csv(&good).unwrap();
        assert_eq!(ssf.bands(), 4);
        assert_eq!(ssf.matrix()[(1, 2)], 0.8);

        let bad_header = dir.path().join("bad1.csv");
        std::fs::write(&bad_header, "wl,r,g,b\n400,1,2,3\n").unwrap();
        assert!(load_ssf_csv::<f64>(&bad_header).is_err());

        let bad_value = dir.path().join("bad2.csv");
        std::fs::write(&bad_value, "wavelength,r,g,b\n400,1,x,3\n").unwrap();
        assert!(load_ssf_csv::<f64>(&bad_value).is_err());
    }

    #[test]
    fn illuminant_csv_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("illum.csv");
        std::fs::write(&path, "wavelength,power\n400,14.7\n410,17.6\n").unwrap();
        let l: Illuminant<f64> = load_illuminant_csv(&path).unwrap();
        assert_eq!(l.bands(), 2);
        assert!((l.max_power() - 17.6).abs() < 1e-12);
        assert!(Illuminant::new(vec![400.0], vec![0.0]).is_err());
        assert!(Illuminant::new(vec![400.0, 400.0], vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn split_then_synthesize_still_works() {
        // Smoke link between hsio and spectral: split does not disturb P.
        let cube = small_cube(8, 3, 3, 31);
        let ssf = split_ssf(identity_ssf(8)).unwrap();
        let rgb = synthesize_rgb(&cube, &ssf).unwrap();
        assert_eq!(rgb.band(0), cube.band(0));
    }

    proptest! {
        #[test]
        fn prop_hsc1_roundtrip(bands in 1usize..6, nx in 1usize..7, ny in 1usize..7, seed in 0u64..100) {
            let cube = small_cube(bands, nx, ny, seed);
            let bytes = save_hsi_bytes(&cube).unwrap();
            let back: HyperCube<f64> = load_hsi_bytes(&bytes, "mem").unwrap();
            let bytes2 = save_hsi_bytes(&back).unwrap();
            prop_assert_eq!(bytes, bytes2);
        }

        #[test]
        fn prop_synthesis_is_linear(seed in 0u64..50) {
            let a = small_cube(6, 3, 2, seed);
            let b = small_cube(6, 3, 2, seed + 1000);
            let ssf = identity_ssf(6);
            let slice: Vec<f64> = a.data().iter().zip(b.data()) .map(|(x, y)| 0.25 * x + 0.5 * y).collect();
            let mix = HyperCube::new(a.wavelengths().to_vec(), 3, 2, slice).unwrap();
            let ra = synthesize_rgb(&a, &ssf).unwrap();
            let rb = synthesize_rgb(&b, &ssf).unwrap();
            let rmix = synthesize_rgb(&mix, &ssf).unwrap();
            for i in 0..rmix.data().len() {
                prop_assert!((rmix.data()[i] - (0.25 * ra.data()[i] + 0.5 * rb.data()[i])).abs() < 1e-12);
            }
        }

        #[test]
        fn prop_nonoverlapping_patches_partition(seed in 0u64..30) {
            let cube = small_cube(2, 12, 12, seed);
            let spec = PatchSpec::new(4, 4, false).unwrap();
            let patches = iter_patches(&cube, spec, 0).unwrap();
            prop_assert_eq!(patches.len(), 9);
            let total: f64 = patches.iter().flat_map(|p| p.data()).sum();
            let direct: f64 = cube.data().iter().sum();
            prop_assert!((total - direct).abs() < 1e-9);
        }
    }
}
