//! MTF-matched degradation, plain interpolation, and band-shift machinery.
//!
//! `degrade` models the sensor's resolution loss: band-dependent Gaussian
//! low-pass filtering matched to a Nyquist gain, followed by decimation at
//! pace R. `expand` is its approximate right inverse (cubic interpolation on
//! the same phase grid). Both use the fixed decimation phase offset R/2 so
//! `degrade(expand(c)) == c` for constants.

use crate::autodiff::{ConvWeights, CropSpec, Graph, NodeId, Padding};
use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

/// Acquisition geometry and training hyperparameters for one sensor class.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorProfile {
    /// PAN/MS resolution ratio R.
    pub ratio: usize,
    /// Per-band MTF gain at the decimated grid's Nyquist frequency.
    pub ms_nyquist_gains: Vec<f64>,
    pub pan_nyquist_gain: f64,
    /// Odd tap count for the degradation kernels; at least 4R+1.
    pub kernel_size: usize,
    /// Patch side for local correlation fields.
    pub sigma: usize,
    /// Spatial-loss weight in the combined training loss.
    pub beta: f64,
    pub learning_rate: f64,
    /// Default target-adaptation iteration budget.
    pub adapt_iters: u32,
}

impl SensorProfile {
    /// WorldView-like defaults for a B-band product.
    pub fn worldview_like(bands: usize) -> Self {
        SensorProfile {
            ratio: 4,
            ms_nyquist_gains: vec![0.29; bands],
            pan_nyquist_gain: 0.15,
            kernel_size: 41,
            sigma: 4,
            beta: 0.36,
            learning_rate: 1e-5,
            adapt_iters: 100,
        }
    }

    /// GeoEye-like defaults for a B-band product.
    pub fn geoeye_like(bands: usize) -> Self {
        SensorProfile { beta: 0.25, learning_rate: 5e-5, ..Self::worldview_like(bands) }
    }

    pub fn bands(&self) -> usize {
        self.ms_nyquist_gains.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratio < 2 {
            return Err(Error::InvalidProfile(format!("ratio must be >= 2, got {}", self.ratio)));
        }
        if self.kernel_size % 2 == 0 || self.kernel_size < 4 * self.ratio + 1 {
            return Err(Error::InvalidProfile(format!(
                "kernel_size must be odd and >= 4R+1 = {}, got {}",
                4 * self.ratio + 1,
                self.kernel_size
            )));
        }
        for &g in self.ms_nyquist_gains.iter().chain(std::iter::once(&self.pan_nyquist_gain)) {
            if !(g > 0.0 && g < 1.0) {
                return Err(Error::InvalidProfile(format!("Nyquist gains must lie in (0,1), got {g}")));
            }
        }
        if self.sigma < 2 {
            return Err(Error::InvalidProfile(format!("sigma must be >= 2, got {}", self.sigma)));
        }
        if self.beta < 0.0 {
            return Err(Error::InvalidProfile(format!("beta must be >= 0, got {}", self.beta)));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidProfile(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.ms_nyquist_gains.is_empty() {
            return Err(Error::InvalidProfile("at least one MS band required".into()));
        }
        Ok(())
    }

    /// Decimation phase: a low-res sample sits at high-res index r*R + R/2.
    pub fn phase_offset(&self) -> usize {
        self.ratio / 2
    }
}

/// Separable low-pass kernel with unit DC gain.
#[derive(Debug, Clone)]
pub struct Kernel {
    size: usize,
    taps_1d: Vec<f64>,
    taps_2d: Vec<f64>,
}

impl Kernel {
    pub fn size(&self) -> usize {
        self.size
    }

    /// The separable factor; `taps()` is its outer product.
    pub fn factor(&self) -> &[f64] {
        &self.taps_1d
    }

    /// Full 2-D taps, row-major `size x size`.
    pub fn taps(&self) -> &[f64] {
        &self.taps_2d
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.taps_2d[row * self.size + col]
    }
}

/// Magnitude response of normalized taps at frequency `freq` cycles/sample.
fn tap_response(taps: &[f64], freq: f64) -> f64 {
    let center = (taps.len() - 1) as f64 / 2.0;
    let mut re = 0.0;
    let mut im = 0.0;
    for (n, &t) in taps.iter().enumerate() {
        let phase = -2.0 * std::f64::consts::PI * freq * (n as f64 - center);
        re += t * phase.cos();
        im += t * phase.sin();
    }
    (re * re + im * im).sqrt()
}

fn gaussian_taps(std_dev: f64, size: usize) -> Vec<f64> {
    let center = (size - 1) as f64 / 2.0;
    let mut taps: Vec<f64> = (0..size)
        .map(|n| {
            let d = n as f64 - center;
            (-0.5 * d * d / (std_dev * std_dev)).exp()
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// Builds the separable Gaussian whose response at the decimated grid's
/// Nyquist frequency (1/(2R) cycles per high-res sample) equals
/// `gain_at_nyquist`. The width is solved on the discrete, truncated,
/// renormalized taps so the match holds for any gain.
pub fn mtf_kernel(gain_at_nyquist: f64, kernel_size: usize, ratio: usize) -> Result<Kernel> {
    if !(gain_at_nyquist > 0.0 && gain_at_nyquist < 1.0) {
        return Err(Error::BadGain(gain_at_nyquist));
    }
    if kernel_size % 2 == 0 {
        return Err(Error::EvenKernel { height: kernel_size, width: kernel_size });
    }
    if ratio < 2 {
        return Err(Error::InvalidArgument(format!("ratio must be >= 2, got {ratio}")));
    }
    let nyquist = 1.0 / (2.0 * ratio as f64);
    // response is monotone decreasing in the Gaussian width
    let mut lo = 1e-6;
    let mut hi = kernel_size as f64;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if tap_response(&gaussian_taps(mid, kernel_size), nyquist) > gain_at_nyquist {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let taps_1d = gaussian_taps(0.5 * (lo + hi), kernel_size);
    let mut taps_2d = Vec::with_capacity(kernel_size * kernel_size);
    for &a in &taps_1d {
        for &b in &taps_1d {
            taps_2d.push(a * b);
        }
    }
    Ok(Kernel { size: kernel_size, taps_1d, taps_2d })
}

/// Integer per-band registration shifts on the high-resolution grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BandShifts {
    offsets: Vec<(i32, i32)>,
}

impl BandShifts {
    pub fn new(offsets: Vec<(i32, i32)>, ratio: usize) -> Result<Self> {
        let limit = ratio as i32;
        for &(dx, dy) in &offsets {
            if dx.abs() > limit || dy.abs() > limit {
                return Err(Error::ShiftOutOfRange { dx: dx as i64, dy: dy as i64, limit: limit as i64 });
            }
        }
        Ok(BandShifts { offsets })
    }

    pub fn zero(bands: usize) -> Self {
        BandShifts { offsets: vec![(0, 0); bands] }
    }

    pub fn offsets(&self) -> &[(i32, i32)] {
        &self.offsets
    }

    pub fn is_zero(&self) -> bool {
        self.offsets.iter().all(|&(dx, dy)| dx == 0 && dy == 0)
    }
}

/// One band's shift estimate flagged degenerate when the search input had no
/// usable variance.
#[derive(Debug, Clone)]
pub struct ShiftEstimate {
    pub shifts: BandShifts,
    /// Band indexes whose correlation search was degenerate (constant data);
    /// those entries report (0, 0).
    pub degenerate_bands: Vec<usize>,
}

// ---------------------------------------------------------------------------
// Degradation (graph builders + pure wrappers)
// ---------------------------------------------------------------------------

fn constant_conv_1d(g: &mut Graph, input: NodeId, taps: &[f64], horizontal: bool) -> Result<NodeId> {
    let k = taps.len();
    let (kh, kw) = if horizontal { (1, k) } else { (k, 1) };
    let w = ConvWeights::new(1, 1, kh, kw, taps.to_vec())?;
    let wn = g.constant_weights(w);
    g.conv2d(input, wn, None, Padding::Valid)
}

/// Band-dependent low-pass plus decimation on a graph node. The sampling
/// grid of band b starts at (R/2 + dy_b, R/2 + dx_b) with stride R and
/// clamped (replicate) indices.
pub(crate) fn build_shift_decimate(
    g: &mut Graph,
    input: NodeId,
    gains: &[f64],
    shifts: &BandShifts,
    profile: &SensorProfile,
) -> Result<NodeId> {
    let t = g.tensor(input);
    let (bands, h, w) = t.shape();
    let r = profile.ratio;
    if bands != gains.len() || bands != shifts.offsets().len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} bands", gains.len()),
            found: format!("{bands}"),
        });
    }
    if h % r != 0 {
        return Err(Error::NotDivisible { dim: "height", value: h, ratio: r });
    }
    if w % r != 0 {
        return Err(Error::NotDivisible { dim: "width", value: w, ratio: r });
    }
    let half = profile.kernel_size / 2;
    let offset = profile.phase_offset() as i64;
    let padded = g.pad_replicate(input, half, half, half, half)?;
    let mut low_bands = Vec::with_capacity(bands);
    for b in 0..bands {
        let kernel = mtf_kernel(gains[b], profile.kernel_size, r)?;
        let band = g.crop(CropSpec {
            input: padded,
            band0: b,
            bands: 1,
            row0: 0,
            col0: 0,
            height: h + 2 * half,
            width: w + 2 * half,
            step: 1,
        })?;
        let fx = constant_conv_1d(g, band, kernel.factor(), true)?;
        let fy = constant_conv_1d(g, fx, kernel.factor(), false)?;
        let (dx, dy) = shifts.offsets()[b];
        let sampled = g.crop(CropSpec {
            input: fy,
            band0: 0,
            bands: 1,
            row0: offset + dy as i64,
            col0: offset + dx as i64,
            height: h / r,
            width: w / r,
            step: r,
        })?;
        low_bands.push(sampled);
    }
    g.concat_bands(&low_bands)
}

pub(crate) fn build_degrade(g: &mut Graph, input: NodeId, gains: &[f64], profile: &SensorProfile) -> Result<NodeId> {
    let bands = g.tensor(input).bands();
    build_shift_decimate(g, input, gains, &BandShifts::zero(bands), profile)
}

/// MTF-matched degradation: per-band replicate-padded Gaussian filtering
/// followed by decimation at pace R with phase offset R/2.
pub fn degrade(m: &ImageTensor, profile: &SensorProfile) -> Result<ImageTensor> {
    if m.bands() != profile.bands() {
        return Err(Error::ChannelMismatch { expected: profile.bands(), found: m.bands() });
    }
    let mut g = Graph::new();
    let x = g.constant(m.clone());
    let out = build_degrade(&mut g, x, &profile.ms_nyquist_gains, profile)?;
    Ok(g.tensor(out).clone())
}

/// Degradation of the single-band PAN with its own Nyquist gain.
pub fn degrade_pan(p: &ImageTensor, profile: &SensorProfile) -> Result<ImageTensor> {
    if p.bands() != 1 {
        return Err(Error::ChannelMismatch { expected: 1, found: p.bands() });
    }
    let mut g = Graph::new();
    let x = g.constant(p.clone());
    let out = build_degrade(&mut g, x, &[profile.pan_nyquist_gain], profile)?;
    Ok(g.tensor(out).clone())
}

/// `degrade` with the sampling grid of band b translated by (dx_b, dy_b)
/// high-res pixels; zero shifts reduce exactly to `degrade`.
pub fn shift_decimate(m: &ImageTensor, shifts: &BandShifts, profile: &SensorProfile) -> Result<ImageTensor> {
    if m.bands() != profile.bands() {
        return Err(Error::ChannelMismatch { expected: profile.bands(), found: m.bands() });
    }
    let mut g = Graph::new();
    let x = g.constant(m.clone());
    let out = build_shift_decimate(&mut g, x, &profile.ms_nyquist_gains, shifts, profile)?;
    Ok(g.tensor(out).clone())
}

/// Replicate-padded MTF filtering of the PAN without decimation.
pub fn lowpass_pan(p: &ImageTensor, gain: f64, profile: &SensorProfile) -> Result<ImageTensor> {
    if p.bands() != 1 {
        return Err(Error::ChannelMismatch { expected: 1, found: p.bands() });
    }
    let kernel = mtf_kernel(gain, profile.kernel_size, profile.ratio)?;
    let half = profile.kernel_size / 2;
    let mut g = Graph::new();
    let x = g.constant(p.clone());
    let padded = g.pad_replicate(x, half, half, half, half)?;
    let fx = constant_conv_1d(&mut g, padded, kernel.factor(), true)?;
    let fy = constant_conv_1d(&mut g, fx, kernel.factor(), false)?;
    Ok(g.tensor(fy).clone())
}

// ---------------------------------------------------------------------------
// Expansion (plain interpolation)
// ---------------------------------------------------------------------------

/// Keys cubic-convolution kernel, a = -1/2.
fn cubic(s: f64) -> f64 {
    let s = s.abs();
    if s < 1.0 {
        (1.5 * s - 2.5) * s * s + 1.0
    } else if s < 2.0 {
        ((-0.5 * s + 2.5) * s - 4.0) * s + 2.0
    } else {
        0.0
    }
}

/// Zero-insertion upsampling by R with separable cubic interpolation,
/// phase-aligned so low-res sample r lands at high-res index r*R + R/2.
/// Constants map to the same constant.
pub fn expand(m: &ImageTensor, ratio: usize) -> Result<ImageTensor> {
    if ratio < 2 {
        return Err(Error::InvalidArgument(format!("ratio must be >= 2, got {ratio}")));
    }
    let (bands, h, w) = m.shape();
    let offset = (ratio / 2) as f64;
    let rf = ratio as f64;

    // per-output-column source taps, shared by every row pass
    let plan = |n_in: usize, n_out: usize| -> Vec<([i64; 4], [f64; 4])> {
        (0..n_out)
            .map(|p| {
                let t = (p as f64 - offset) / rf;
                let base = t.floor();
                let f = t - base;
                let idx = [base as i64 - 1, base as i64, base as i64 + 1, base as i64 + 2];
                let wts = [cubic(1.0 + f), cubic(f), cubic(1.0 - f), cubic(2.0 - f)];
                let _ = n_in;
                (idx, wts)
            })
            .collect()
    };

    let (hh, ww) = (h * ratio, w * ratio);
    let col_plan = plan(w, ww);
    let row_plan = plan(h, hh);

    // rows pass: (bands, h, w) -> (bands, h, ww)
    let mut mid = vec![0.0f64; bands * h * ww];
    for b in 0..bands {
        for r in 0..h {
            let src = &m.data()[(b * h + r) * w..][..w];
            let dst = &mut mid[(b * h + r) * ww..][..ww];
            for (p, (idx, wts)) in col_plan.iter().enumerate() {
                let mut acc = 0.0;
                for k in 0..4 {
                    let c = idx[k].clamp(0, w as i64 - 1) as usize;
                    acc += wts[k] * src[c];
                }
                dst[p] = acc;
            }
        }
    }
    // cols pass: (bands, h, ww) -> (bands, hh, ww)
    let mut out = vec![0.0f64; bands * hh * ww];
    for b in 0..bands {
        for (p, (idx, wts)) in row_plan.iter().enumerate() {
            let rows: Vec<&[f64]> = idx
                .iter()
                .map(|&ri| {
                    let r = ri.clamp(0, h as i64 - 1) as usize;
                    &mid[(b * h + r) * ww..][..ww]
                })
                .collect();
            let dst = &mut out[(b * hh + p) * ww..][..ww];
            for c in 0..ww {
                dst[c] = wts[0] * rows[0][c] + wts[1] * rows[1][c] + wts[2] * rows[2][c] + wts[3] * rows[3][c];
            }
        }
    }
    Ok(ImageTensor::from_parts(bands, hh, ww, out))
}

// ---------------------------------------------------------------------------
// Band-shift estimation
// ---------------------------------------------------------------------------

/// Global correlation coefficient between two equal-length slices.
/// Returns None when either side has (near-)zero variance.
pub(crate) fn global_correlation(a: &[f64], b: &[f64]) -> Option<f64> {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let dx = x - ma;
        let dy = y - mb;
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let floor = 1e-12 * scale * scale * n;
    if va <= floor || vb <= floor {
        return None;
    }
    Some(cov / (va.sqrt() * vb.sqrt()))
}

/// Estimates each band's registration shift against the PAN: the integer
/// (dx, dy) in [-R, R]^2 maximizing the global correlation between the
/// band of expand(M1) translated by (dx, dy) and the band-gain low-passed
/// PAN. Ties break toward smaller |dx|+|dy|, then lexicographically.
pub fn estimate_band_shifts(m1: &ImageTensor, p0: &ImageTensor, profile: &SensorProfile) -> Result<ShiftEstimate> {
    let r = profile.ratio;
    if p0.bands() != 1 {
        return Err(Error::ChannelMismatch { expected: 1, found: p0.bands() });
    }
    if p0.height() != m1.height() * r || p0.width() != m1.width() * r {
        return Err(Error::ShapeMismatch {
            expected: format!("PAN {}x{}", m1.height() * r, m1.width() * r),
            found: format!("{}x{}", p0.height(), p0.width()),
        });
    }
    if m1.bands() != profile.bands() {
        return Err(Error::ChannelMismatch { expected: profile.bands(), found: m1.bands() });
    }
    let expanded = expand(m1, r)?;
    let limit = r as i32;
    let mut offsets = Vec::with_capacity(m1.bands());
    let mut degenerate = Vec::new();
    for b in 0..m1.bands() {
        let reference = lowpass_pan(p0, profile.ms_nyquist_gains[b], profile)?;
        let band = expanded.extract_band(b)?;
        let mut best: Option<(f64, i32, i32)> = None;
        let mut saw_signal = false;
        for dy in -limit..=limit {
            for dx in -limit..=limit {
                let moved = band.translate(dx as i64, dy as i64);
                let Some(corr) = global_correlation(moved.data(), reference.data()) else {
                    continue;
                };
                saw_signal = true;
                let better = match best {
                    None => true,
                    Some((bc, bx, by)) => {
                        corr > bc
                            || (corr == bc
                                && (dx.abs() + dy.abs() < bx.abs() + by.abs()
                                    || (dx.abs() + dy.abs() == bx.abs() + by.abs() && (dx, dy) < (bx, by))))
                    }
                };
                if better {
                    best = Some((corr, dx, dy));
                }
            }
        }
        if !saw_signal {
            degenerate.push(b);
            offsets.push((0, 0));
        } else {
            let (_, dx, dy) = best.unwrap();
            offsets.push((dx, dy));
        }
    }
    Ok(ShiftEstimate { shifts: BandShifts::new(offsets, r)?, degenerate_bands: degenerate })
}
