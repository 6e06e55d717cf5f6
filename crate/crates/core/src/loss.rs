//! Full-resolution training loss: a spectral term comparing the degraded
//! output against the original MS, and a spatial term built on local
//! PAN-to-band correlation fields gated by a reference field, combined as
//! `spectral + beta * spatial`.
//!
//! Everything here is expressed as graph nodes over box sums so the loss is
//! differentiable w.r.t. the pansharpened image; the public functions are
//! thin forward-only wrappers around the same builders.

use crate::autodiff::{CropSpec, Graph, NodeId};
use crate::error::{Error, Result};
use crate::resample::{build_shift_decimate, expand, lowpass_pan, BandShifts, SensorProfile};
use crate::tensor::ImageTensor;

/// Local correlation between a single-band reference and each band of an
/// image: one value per (row, col, band), patches centered with replicate
/// extension. Sites where either patch has no variance are invalid and
/// carry rho = 0.
#[derive(Debug, Clone)]
pub struct CorrelationField {
    sigma: usize,
    bands: usize,
    height: usize,
    width: usize,
    rho: Vec<f64>,
    valid: Vec<bool>,
}

impl CorrelationField {
    pub fn sigma(&self) -> usize {
        self.sigma
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.bands, self.height, self.width)
    }

    #[inline]
    pub fn rho(&self, band: usize, row: usize, col: usize) -> f64 {
        self.rho[(band * self.height + row) * self.width + col]
    }

    #[inline]
    pub fn is_valid(&self, band: usize, row: usize, col: usize) -> bool {
        self.valid[(band * self.height + row) * self.width + col]
    }

    pub fn rho_data(&self) -> &[f64] {
        &self.rho
    }

    pub fn valid_data(&self) -> &[bool] {
        &self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Mean of rho over valid sites (0 when none are valid).
    pub fn mean_valid_rho(&self) -> f64 {
        let mut acc = 0.0;
        let mut n = 0usize;
        for (r, &v) in self.rho.iter().zip(&self.valid) {
            if v {
                acc += r;
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            acc / n as f64
        }
    }
}

/// The combined loss with its components; `total == spectral + beta * spatial`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub spectral: f64,
    pub spatial: f64,
    pub total: f64,
    pub beta: f64,
}

/// Variance floor for correlation denominators: numerical-safety scale for
/// near-constant patches. The relative term follows the dynamic range; the
/// absolute term keeps ratios bounded when the range collapses.
fn variance_floor(range: f64, max_abs: f64) -> f64 {
    1e-9 * range * range + 1e-12 * (1.0 + max_abs * max_abs)
}

fn floor_for(tensors: &[&ImageTensor]) -> f64 {
    let mut range = 0.0f64;
    let mut max_abs = 0.0f64;
    for t in tensors {
        range = range.max(t.max() - t.min());
        max_abs = max_abs.max(t.max().abs()).max(t.min().abs());
    }
    variance_floor(range, max_abs)
}

/// Centered box sum with replicate borders: same spatial size as the input,
/// window rows [i-(s-1)/2, i-(s-1)/2+s-1].
fn box_sum_centered(g: &mut Graph, input: NodeId, sigma: usize) -> Result<NodeId> {
    let lead = (sigma - 1) / 2;
    let trail = sigma - 1 - lead;
    let padded = g.pad_replicate(input, lead, trail, lead, trail)?;
    g.box_sum(padded, sigma)
}

/// Per-band correlation graph: returns the (masked) rho node plus the
/// validity mask that was applied.
struct BandCorrelation {
    rho: NodeId,
    valid: Vec<bool>,
}

/// Precomputed reference-side statistics for correlating one single-band
/// reference image against changing bands.
///
/// Both sides are pre-centered by their global means before the box sums:
/// correlation is invariant to constant shifts, so values and gradients are
/// unchanged, but the `E[xy] - mx*my` cancellation is tamed.
struct RefStats {
    centered: ImageTensor,
    mean: ImageTensor,
    var_clamped: ImageTensor,
    valid: Vec<bool>,
    floor: f64,
    sigma: usize,
}

impl RefStats {
    fn new(reference: &ImageTensor, sigma: usize, floor: f64) -> Result<RefStats> {
        let shift = reference.mean();
        let centered = reference.map(|v| v - shift);
        let n = (sigma * sigma) as f64;
        let mut g = Graph::new();
        let x = g.constant(centered.clone());
        let sx = box_sum_centered(&mut g, x, sigma)?;
        let mean = g.scale(sx, 1.0 / n);
        let xx = g.mul(x, x)?;
        let sxx = box_sum_centered(&mut g, xx, sigma)?;
        let ex2 = g.scale(sxx, 1.0 / n);
        let mean_sq = g.mul(mean, mean)?;
        let var = g.sub(ex2, mean_sq)?;
        let var_t = g.tensor(var).clone();
        let valid: Vec<bool> = var_t.data().iter().map(|&v| v > floor).collect();
        let var_clamped = var_t.map(|v| if v > floor { v } else { floor });
        Ok(RefStats {
            centered,
            mean: g.tensor(mean).clone(),
            var_clamped,
            valid,
            floor,
            sigma,
        })
    }

    /// Builds the correlation of `band` (a 1-band node) against the
    /// precomputed reference. Differentiable w.r.t. the band node.
    fn correlate(&self, g: &mut Graph, band: NodeId) -> Result<BandCorrelation> {
        let n = (self.sigma * self.sigma) as f64;
        let (bb, bh, bw) = g.tensor(band).shape();
        let band_shift = g.tensor(band).mean();
        let shift_node = g.constant(ImageTensor::constant(bb, bh, bw, band_shift));
        let y = g.sub(band, shift_node)?;

        let x = g.constant(self.centered.clone());
        let mean_x = g.constant(self.mean.clone());
        let var_x = g.constant(self.var_clamped.clone());

        let sy = box_sum_centered(g, y, self.sigma)?;
        let mean_y = g.scale(sy, 1.0 / n);
        let yy = g.mul(y, y)?;
        let syy = box_sum_centered(g, yy, self.sigma)?;
        let ey2 = g.scale(syy, 1.0 / n);
        let mean_y_sq = g.mul(mean_y, mean_y)?;
        let var_y = g.sub(ey2, mean_y_sq)?;
        let var_y_clamped = g.clamp_min(var_y, self.floor);

        let xy = g.mul(x, y)?;
        let sxy = box_sum_centered(g, xy, self.sigma)?;
        let exy = g.scale(sxy, 1.0 / n);
        let mean_prod = g.mul(mean_x, mean_y)?;
        let cov = g.sub(exy, mean_prod)?;

        let var_prod = g.mul(var_x, var_y_clamped)?;
        let denom = g.sqrt(var_prod)?;
        let rho_raw = g.div(cov, denom)?;

        let var_y_t = g.tensor(var_y);
        let valid: Vec<bool> = self
            .valid
            .iter()
            .zip(var_y_t.data())
            .map(|(&vx, &vy)| vx && vy > self.floor)
            .collect();
        let (b, h, w) = g.tensor(rho_raw).shape();
        let mask_data: Vec<f64> = valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        let mask = g.constant(ImageTensor::from_parts(b, h, w, mask_data));
        let rho = g.mul(rho_raw, mask)?;
        Ok(BandCorrelation { rho, valid })
    }
}

fn band_node(g: &mut Graph, img: NodeId, band: usize) -> Result<NodeId> {
    let (_, h, w) = g.tensor(img).shape();
    g.crop(CropSpec { input: img, band0: band, bands: 1, row0: 0, col0: 0, height: h, width: w, step: 1 })
}

/// Sample correlation between sigma x sigma patches of the single-band
/// reference and every band of `img`, at every pixel.
pub fn correlation_field(reference: &ImageTensor, img: &ImageTensor, sigma: usize) -> Result<CorrelationField> {
    if reference.bands() != 1 {
        return Err(Error::ChannelMismatch { expected: 1, found: reference.bands() });
    }
    if sigma < 2 {
        return Err(Error::InvalidArgument(format!("sigma must be >= 2, got {sigma}")));
    }
    if reference.height() != img.height() || reference.width() != img.width() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", reference.height(), reference.width()),
            found: format!("{}x{}", img.height(), img.width()),
        });
    }
    let floor = floor_for(&[reference, img]);
    let stats = RefStats::new(reference, sigma, floor)?;
    let (bands, h, w) = img.shape();
    let mut rho = Vec::with_capacity(bands * h * w);
    let mut valid = Vec::with_capacity(bands * h * w);
    let mut g = Graph::new();
    let img_node = g.constant(img.clone());
    for b in 0..bands {
        let band = band_node(&mut g, img_node, b)?;
        let corr = stats.correlate(&mut g, band)?;
        let vals = g.tensor(corr.rho);
        rho.extend(vals.data().iter().map(|&v| v.clamp(-1.0, 1.0)));
        valid.extend_from_slice(&corr.valid);
    }
    Ok(CorrelationField { sigma, bands, height: h, width: w, rho, valid })
}

/// Reference correlation field: band b of the interpolated MS against the
/// PAN low-passed with that band's MTF gain. Treated as a constant by the
/// training loss (no gradient flows through it).
pub fn reference_field(p0: &ImageTensor, m1: &ImageTensor, profile: &SensorProfile) -> Result<CorrelationField> {
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
    let (bands, h, w) = expanded.shape();
    let mut rho = Vec::with_capacity(bands * h * w);
    let mut valid = Vec::with_capacity(bands * h * w);
    for b in 0..bands {
        let low = lowpass_pan(p0, profile.ms_nyquist_gains[b], profile)?;
        let band = expanded.extract_band(b)?;
        let field = correlation_field(&low, &band, profile.sigma)?;
        rho.extend_from_slice(field.rho_data());
        valid.extend_from_slice(field.valid_data());
    }
    Ok(CorrelationField { sigma: profile.sigma, bands, height: h, width: w, rho, valid })
}

/// Graph-level bookkeeping the mode-contract checks rely on.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LossGraphStats {
    pub degrade_calls: u32,
    pub degrade_input: Option<NodeId>,
}

/// Everything constant across training iterations on one target.
pub(crate) struct LossPrep {
    pub pan: ImageTensor,
    pub m1: ImageTensor,
    pub shifts: BandShifts,
    ref_rho: Vec<ImageTensor>,
    ref_valid: Vec<Vec<bool>>,
    pan_stats: RefStats,
    sigma: usize,
}

impl LossPrep {
    pub fn new(p0: &ImageTensor, m1: &ImageTensor, shifts: BandShifts, profile: &SensorProfile) -> Result<LossPrep> {
        let reference = reference_field(p0, m1, profile)?;
        Self::with_reference(p0, m1, shifts, &reference, profile)
    }

    pub fn with_reference(
        p0: &ImageTensor,
        m1: &ImageTensor,
        shifts: BandShifts,
        reference: &CorrelationField,
        profile: &SensorProfile,
    ) -> Result<LossPrep> {
        if reference.sigma() != profile.sigma {
            return Err(Error::InvalidArgument(format!(
                "reference field sigma {} does not match profile sigma {}",
                reference.sigma(),
                profile.sigma
            )));
        }
        let (bands, h, w) = reference.shape();
        if (bands, h, w) != (m1.bands(), p0.height(), p0.width()) {
            return Err(Error::ShapeMismatch {
                expected: format!("({}, {}, {})", m1.bands(), p0.height(), p0.width()),
                found: format!("{:?}", reference.shape()),
            });
        }
        // floor fixed from the PAN: its range is the scene's dynamic range
        // and it stays constant while the output image evolves
        let floor = floor_for(&[p0]);
        let pan_stats = RefStats::new(p0, profile.sigma, floor)?;
        let plane = h * w;
        let mut ref_rho = Vec::with_capacity(bands);
        let mut ref_valid = Vec::with_capacity(bands);
        for b in 0..bands {
            ref_rho.push(ImageTensor::from_parts(1, h, w, reference.rho_data()[b * plane..(b + 1) * plane].to_vec()));
            ref_valid.push(reference.valid_data()[b * plane..(b + 1) * plane].to_vec());
        }
        Ok(LossPrep {
            pan: p0.clone(),
            m1: m1.clone(),
            shifts,
            ref_rho,
            ref_valid,
            pan_stats,
            sigma: profile.sigma,
        })
    }

    pub fn bands(&self) -> usize {
        self.ref_rho.len()
    }
}

pub(crate) struct LossNodes {
    pub total: NodeId,
    pub spectral: NodeId,
    pub spatial: NodeId,
    pub stats: LossGraphStats,
}

/// Builds the full training loss on `img` (the pansharpened output node).
/// The clip of the spatial term is a gradient gate: sites at or above the
/// reference correlation contribute exactly zero value and zero gradient.
pub(crate) fn build_total_loss(g: &mut Graph, img: NodeId, prep: &LossPrep, profile: &SensorProfile) -> Result<LossNodes> {
    let (bands, h, w) = g.tensor(img).shape();
    if bands != prep.bands() || h != prep.pan.height() || w != prep.pan.width() {
        return Err(Error::ShapeMismatch {
            expected: format!("({}, {}, {})", prep.bands(), prep.pan.height(), prep.pan.width()),
            found: format!("({bands}, {h}, {w})"),
        });
    }
    // spectral: mean |shift_decimate(img) - m1|
    let projected = build_shift_decimate(g, img, &profile.ms_nyquist_gains, &prep.shifts, profile)?;
    let m1_node = g.constant(prep.m1.clone());
    let diff = g.sub(projected, m1_node)?;
    let absdiff = g.abs(diff);
    let spectral = g.reduce_mean(absdiff);

    // spatial: mean over all sites of (1 - rho) gated below the reference
    let ones = g.constant(ImageTensor::constant(1, h, w, 1.0));
    let mut contributions = Vec::with_capacity(bands);
    for b in 0..bands {
        let band = band_node(g, img, b)?;
        let corr = prep.pan_stats.correlate(g, band)?;
        let rho_vals = g.tensor(corr.rho).clone();
        let ref_rho = &prep.ref_rho[b];
        let gate_data: Vec<f64> = (0..h * w)
            .map(|i| {
                let open = corr.valid[i] && rho_vals.data()[i] < ref_rho.data()[i];
                if open {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let gate = g.constant(ImageTensor::from_parts(1, h, w, gate_data));
        let shortfall = g.sub(ones, corr.rho)?;
        contributions.push(g.mul(shortfall, gate)?);
    }
    let stacked = g.concat_bands(&contributions)?;
    let spatial = g.reduce_mean(stacked);

    let weighted = g.scale(spatial, profile.beta);
    let total = g.add(spectral, weighted)?;
    Ok(LossNodes {
        total,
        spectral,
        spatial,
        stats: LossGraphStats { degrade_calls: 1, degrade_input: Some(img) },
    })
}

pub(crate) fn breakdown_from(g: &Graph, nodes: &LossNodes, beta: f64) -> Result<LossBreakdown> {
    let spectral = g.scalar(nodes.spectral)?;
    let spatial = g.scalar(nodes.spatial)?;
    Ok(LossBreakdown { spectral, spatial, total: spectral + beta * spatial, beta })
}

/// Mean over all (row, col, band) sites of `1 - rho` where the local
/// correlation falls below the reference field, 0 elsewhere.
pub fn spatial_loss(p0: &ImageTensor, img: &ImageTensor, reference: &CorrelationField, sigma: usize) -> Result<f64> {
    if reference.sigma() != sigma {
        return Err(Error::InvalidArgument(format!(
            "reference sigma {} does not match requested sigma {sigma}",
            reference.sigma()
        )));
    }
    let (bands, h, w) = img.shape();
    if reference.shape() != (bands, h, w) {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", (bands, h, w)),
            found: format!("{:?}", reference.shape()),
        });
    }
    if p0.bands() != 1 || p0.height() != h || p0.width() != w {
        return Err(Error::ShapeMismatch {
            expected: format!("(1, {h}, {w})"),
            found: format!("{:?}", p0.shape()),
        });
    }
    let floor = floor_for(&[p0]);
    let stats = RefStats::new(p0, sigma, floor)?;
    let mut g = Graph::new();
    let ones = g.constant(ImageTensor::constant(1, h, w, 1.0));
    let img_node = g.constant(img.clone());
    let plane = h * w;
    let mut contributions = Vec::with_capacity(bands);
    for b in 0..bands {
        let band = band_node(&mut g, img_node, b)?;
        let corr = stats.correlate(&mut g, band)?;
        let rho_vals = g.tensor(corr.rho).clone();
        let gate_data: Vec<f64> = (0..plane)
            .map(|i| {
                if corr.valid[i] && rho_vals.data()[i] < reference.rho_data()[b * plane + i] {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let gate = g.constant(ImageTensor::from_parts(1, h, w, gate_data));
        let shortfall = g.sub(ones, corr.rho)?;
        contributions.push(g.mul(shortfall, gate)?);
    }
    let stacked = g.concat_bands(&contributions)?;
    let spatial = g.reduce_mean(stacked);
    g.scalar(spatial)
}

/// Mean absolute difference between the shift-compensated degradation of
/// `img` and the original MS.
pub fn spectral_loss(img: &ImageTensor, m1: &ImageTensor, shifts: &BandShifts, profile: &SensorProfile) -> Result<f64> {
    let r = profile.ratio;
    if img.height() != m1.height() * r || img.width() != m1.width() * r || img.bands() != m1.bands() {
        return Err(Error::ShapeMismatch {
            expected: format!("({}, {}, {})", m1.bands(), m1.height() * r, m1.width() * r),
            found: format!("{:?}", img.shape()),
        });
    }
    let mut g = Graph::new();
    let x = g.constant(img.clone());
    let projected = build_shift_decimate(&mut g, x, &profile.ms_nyquist_gains, shifts, profile)?;
    let m1_node = g.constant(m1.clone());
    let diff = g.sub(projected, m1_node)?;
    let absdiff = g.abs(diff);
    let mean = g.reduce_mean(absdiff);
    g.scalar(mean)
}

/// Combined loss evaluation with the recorded breakdown.
pub fn total_loss(
    p0: &ImageTensor,
    m1: &ImageTensor,
    img: &ImageTensor,
    shifts: &BandShifts,
    reference: &CorrelationField,
    profile: &SensorProfile,
) -> Result<LossBreakdown> {
    let prep = LossPrep::with_reference(p0, m1, shifts.clone(), reference, profile)?;
    let mut g = Graph::new();
    let img_node = g.constant(img.clone());
    let nodes = build_total_loss(&mut g, img_node, &prep, profile)?;
    breakdown_from(&g, &nodes, profile.beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resample::degrade;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(seed: u64, bands: usize, h: usize, w: usize, lo: f64, hi: f64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(bands, h, w, (0..bands * h * w).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    /// Brute-force per-patch sample correlation: gather each clamped window,
    /// subtract the patch means, accumulate centered products directly.
    fn brute_force_field(reference: &ImageTensor, img: &ImageTensor, sigma: usize) -> (Vec<f64>, Vec<bool>) {
        let (bands, h, w) = img.shape();
        let floor = floor_for(&[reference, img]);
        let lead = (sigma - 1) as i64 / 2;
        let n = (sigma * sigma) as f64;
        let mut rho = Vec::new();
        let mut valid = Vec::new();
        for b in 0..bands {
            for i in 0..h as i64 {
                for j in 0..w as i64 {
                    let mut xs = Vec::with_capacity(sigma * sigma);
                    let mut ys = Vec::with_capacity(sigma * sigma);
                    for dy in 0..sigma as i64 {
                        for dx in 0..sigma as i64 {
                            let r = i - lead + dy;
                            let c = j - lead + dx;
                            xs.push(reference.at_clamped(0, r, c));
                            ys.push(img.at_clamped(b, r, c));
                        }
                    }
                    let mx = xs.iter().sum::<f64>() / n;
                    let my = ys.iter().sum::<f64>() / n;
                    let mut cov = 0.0;
                    let mut vx = 0.0;
                    let mut vy = 0.0;
                    for (x, y) in xs.iter().zip(&ys) {
                        cov += (x - mx) * (y - my);
                        vx += (x - mx) * (x - mx);
                        vy += (y - my) * (y - my);
                    }
                    cov /= n;
                    vx /= n;
                    vy /= n;
                    let ok = vx > floor && vy > floor;
                    valid.push(ok);
                    rho.push(if ok { (cov / (vx * vy).sqrt()).clamp(-1.0, 1.0) } else { 0.0 });
                }
            }
        }
        (rho, valid)
    }

    #[test]
    fn correlation_of_copy_is_one() {
        let pan = random_tensor(1, 1, 12, 12, 0.0, 100.0);
        let img = ImageTensor::stack_bands(&[&pan, &pan]).unwrap();
        let field = correlation_field(&pan, &img, 4).unwrap();
        assert!(field.valid_count() > 0);
        for i in 0..field.rho_data().len() {
            if field.valid_data()[i] {
                assert_eq!(field.rho_data()[i], 1.0, "site {i}");
            }
        }
    }

    #[test]
    fn correlation_of_negated_copy_is_minus_one() {
        let pan = random_tensor(2, 1, 10, 10, 0.0, 50.0);
        let neg = pan.map(|v| -v);
        let field = correlation_field(&pan, &neg, 4).unwrap();
        for i in 0..field.rho_data().len() {
            if field.valid_data()[i] {
                assert!((field.rho_data()[i] + 1.0).abs() < 1e-12, "site {i}: {}", field.rho_data()[i]);
            }
        }
    }

    /// Random instance with a checkerboard component: every window, including
    /// the clamped two-point windows at the border, keeps its local variance
    /// comparable to its local mean offset, so the box-sum and per-patch
    /// evaluations agree far below the comparison tolerance.
    fn conditioned_tensor(seed: u64, bands: usize, h: usize, w: usize) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..bands * h * w)
            .map(|i| {
                let (r, c) = ((i / w) % h, i % w);
                let checker = if (r + c) % 2 == 0 { 0.5 } else { -0.5 };
                checker + rng.random_range(-0.2..0.2)
            })
            .collect();
        ImageTensor::new(bands, h, w, data).unwrap()
    }

    #[test]
    fn correlation_matches_brute_force() {
        for &(seed, size, sigma) in &[(3u64, 4usize, 2usize), (4, 8, 4), (5, 16, 8), (6, 16, 3), (7, 13, 2)] {
            let pan = conditioned_tensor(seed, 1, size, size);
            let img = conditioned_tensor(seed + 100, 2, size, size);
            let field = correlation_field(&pan, &img, sigma).unwrap();
            let (rho, valid) = brute_force_field(&pan, &img, sigma);
            assert_eq!(field.valid_data(), &valid[..]);
            for i in 0..rho.len() {
                assert!(
                    (field.rho_data()[i] - rho[i]).abs() < 1e-12,
                    "site {i}: {} vs {}",
                    field.rho_data()[i],
                    rho[i]
                );
            }
        }
    }

    #[test]
    fn correlation_rejects_bad_inputs() {
        let pan = ImageTensor::zeros(1, 8, 8);
        let img = ImageTensor::zeros(2, 8, 8);
        assert!(correlation_field(&pan, &img, 1).is_err());
        assert!(correlation_field(&img, &img, 4).is_err());
        let small = ImageTensor::zeros(2, 4, 4);
        assert!(correlation_field(&pan, &small, 4).is_err());
    }

    #[test]
    fn correlation_invariant_to_positive_affine() {
        let pan = random_tensor(7, 1, 12, 12, 10.0, 90.0);
        let img = random_tensor(8, 1, 12, 12, 10.0, 90.0);
        let field = correlation_field(&pan, &img, 4).unwrap();
        let scaled = pan.map(|v| 3.5 * v + 200.0);
        let field2 = correlation_field(&scaled, &img, 4).unwrap();
        for i in 0..field.rho_data().len() {
            if field.valid_data()[i] && field2.valid_data()[i] {
                assert!((field.rho_data()[i] - field2.rho_data()[i]).abs() < 1e-10, "site {i}");
            }
        }
    }

    #[test]
    fn constant_band_is_invalid_everywhere() {
        let pan = random_tensor(9, 1, 8, 8, 0.0, 10.0);
        let img = ImageTensor::constant(1, 8, 8, 5.0);
        let field = correlation_field(&pan, &img, 4).unwrap();
        assert_eq!(field.valid_count(), 0);
        assert!(field.rho_data().iter().all(|&v| v == 0.0));
    }

    fn test_profile() -> SensorProfile {
        SensorProfile { kernel_size: 17, ..SensorProfile::worldview_like(2) }
    }

    /// Structured pair (m0, p0, m1) with strong band-to-PAN correlation.
    fn synthetic_pair(seed: u64, h: usize, w: usize, bands: usize) -> (ImageTensor, ImageTensor, ImageTensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        // wide smoothing keeps the texture below the decimation Nyquist so
        // the degrade -> expand chain preserves it
        let box_pass = |src: &[f64]| -> Vec<f64> {
            let mut dst = vec![0.0; h * w];
            for r in 0..h {
                for c in 0..w {
                    let mut acc = 0.0;
                    for dr in -4i64..=4 {
                        for dc in -4i64..=4 {
                            let rr = (r as i64 + dr).clamp(0, h as i64 - 1) as usize;
                            let cc = (c as i64 + dc).clamp(0, w as i64 - 1) as usize;
                            acc += src[rr * w + cc];
                        }
                    }
                    dst[r * w + c] = acc / 81.0;
                }
            }
            dst
        };
        let smooth = box_pass(&box_pass(&noise));
        let mut data = Vec::with_capacity(bands * h * w);
        for b in 0..bands {
            let gain = 1.0 - 0.1 * b as f64;
            for i in 0..h * w {
                let (r, c) = (i / w, i % w);
                let v = 500.0
                    + 250.0 * ((r as f64 / 31.0).sin() + (c as f64 / 23.0).cos())
                    + 120.0 * ((r as f64 + 2.0 * c as f64) / 57.0).sin()
                    + 4000.0 * smooth[i];
                data.push(gain * v + 20.0 * b as f64);
            }
        }
        let m0 = ImageTensor::new(bands, h, w, data).unwrap();
        let pan_data: Vec<f64> = (0..h * w)
            .map(|i| (0..bands).map(|b| m0.data()[b * h * w + i]).sum::<f64>() / bands as f64)
            .collect();
        let p0 = ImageTensor::new(1, h, w, pan_data).unwrap();
        let profile = SensorProfile { ms_nyquist_gains: vec![0.29; bands], kernel_size: 17, ..SensorProfile::worldview_like(bands) };
        let m1 = degrade(&m0, &profile).unwrap();
        (m0, p0, m1)
    }

    #[test]
    fn reference_field_matches_manual_composition() {
        let (_, p0, m1) = synthetic_pair(11, 32, 32, 2);
        let profile = test_profile();
        let field = reference_field(&p0, &m1, &profile).unwrap();
        let expanded = expand(&m1, profile.ratio).unwrap();
        for b in 0..2 {
            let low = lowpass_pan(&p0, profile.ms_nyquist_gains[b], &profile).unwrap();
            let band = expanded.extract_band(b).unwrap();
            let manual = correlation_field(&low, &band, profile.sigma).unwrap();
            let plane = 32 * 32;
            assert_eq!(&field.rho_data()[b * plane..(b + 1) * plane], manual.rho_data());
        }
    }

    #[test]
    fn reference_field_high_on_replicated_pan_structure() {
        let (_, p0, _) = synthetic_pair(12, 64, 64, 2);
        let profile = test_profile();
        // MS made from the PAN itself: reference correlation should be high
        let pan_as_ms = ImageTensor::stack_bands(&[&p0, &p0]).unwrap();
        let m1 = degrade(&pan_as_ms, &profile).unwrap();
        let field = reference_field(&p0, &m1, &profile).unwrap();
        assert!(field.valid_count() > 0);
        assert!(field.mean_valid_rho() > 0.95, "mean rho {}", field.mean_valid_rho());
    }

    #[test]
    fn spatial_loss_zero_when_bands_equal_pan() {
        let (_, p0, m1) = synthetic_pair(13, 32, 32, 2);
        let profile = test_profile();
        let reference = reference_field(&p0, &m1, &profile).unwrap();
        let img = ImageTensor::stack_bands(&[&p0, &p0]).unwrap();
        let loss = spatial_loss(&p0, &img, &reference, profile.sigma).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn spatial_loss_matches_site_enumeration() {
        let (_, p0, m1) = synthetic_pair(14, 32, 32, 1);
        let profile = SensorProfile { ms_nyquist_gains: vec![0.29], ..test_profile() };
        let reference = reference_field(&p0, &m1, &profile).unwrap();
        let img = random_tensor(15, 1, 32, 32, 300.0, 900.0);
        let loss = spatial_loss(&p0, &img, &reference, profile.sigma).unwrap();

        let field = correlation_field(&p0, &img, profile.sigma).unwrap();
        let mut acc = 0.0;
        let total_sites = field.rho_data().len();
        for i in 0..total_sites {
            // replicate gate semantics: below-reference valid sites only
            if field.valid_data()[i] && field.rho_data()[i] < reference.rho_data()[i] {
                acc += 1.0 - field.rho_data()[i];
            }
        }
        let expected = acc / total_sites as f64;
        assert!((loss - expected).abs() < 1e-9, "{loss} vs {expected}");
        assert!(loss > 0.0);
        assert!(loss <= 2.0);
    }

    #[test]
    fn spectral_loss_vanishes_on_consistent_output() {
        let (m0, _, m1) = synthetic_pair(16, 32, 32, 2);
        let profile = test_profile();
        let loss = spectral_loss(&m0, &m1, &BandShifts::zero(2), &profile).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn spectral_loss_of_constant_offset() {
        let (m0, _, m1) = synthetic_pair(17, 32, 32, 2);
        let profile = test_profile();
        let shifted = m0.map(|v| v + 5.0);
        let loss = spectral_loss(&shifted, &m1, &BandShifts::zero(2), &profile).unwrap();
        assert!((loss - 5.0).abs() < 1e-9, "{loss}");
    }

    #[test]
    fn total_loss_breakdown_arithmetic() {
        let breakdown = LossBreakdown { spectral: 0.02, spatial: 0.10, total: 0.02 + 0.36 * 0.10, beta: 0.36 };
        assert!((breakdown.total - 0.056).abs() < 1e-15);

        let (m0, p0, m1) = synthetic_pair(18, 32, 32, 2);
        let profile = test_profile();
        let reference = reference_field(&p0, &m1, &profile).unwrap();
        let shifts = BandShifts::zero(2);
        let b = total_loss(&p0, &m1, &m0, &shifts, &reference, &profile).unwrap();
        assert_eq!(b.total, b.spectral + b.beta * b.spatial);
        assert_eq!(b.beta, profile.beta);
        let sp = spectral_loss(&m0, &m1, &shifts, &profile).unwrap();
        assert_eq!(b.spectral, sp);
        let sl = spatial_loss(&p0, &m0, &reference, profile.sigma).unwrap();
        assert_eq!(b.spatial, sl);

        // beta = 0 leaves only the spectral term
        let p0beta = SensorProfile { beta: 0.0, ..profile };
        let b0 = total_loss(&p0, &m1, &m0, &shifts, &reference, &p0beta).unwrap();
        assert_eq!(b0.total, b0.spectral);
    }

    #[test]
    fn clipped_sites_receive_zero_gradient() {
        let (_, p0, m1) = synthetic_pair(19, 32, 32, 2);
        let profile = test_profile();
        // bands equal to PAN: everything gated, spatial gradient must vanish
        let img = ImageTensor::stack_bands(&[&p0, &p0]).unwrap();
        let prep = LossPrep::new(&p0, &m1, BandShifts::zero(2), &profile).unwrap();
        let mut g = Graph::new();
        let x = g.param(img.clone());
        let nodes = build_total_loss(&mut g, x, &prep, &profile).unwrap();
        assert_eq!(g.scalar(nodes.spatial).unwrap(), 0.0);
        // gradient through the spatial term alone
        let grads = g.backward(nodes.spatial).unwrap();
        let gx = grads.tensor(x).unwrap();
        assert!(gx.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn total_loss_gradient_passes_finite_difference() {
        let (_, p0, m1) = synthetic_pair(20, 16, 16, 2);
        let profile = test_profile();
        let prep = LossPrep::new(&p0, &m1, BandShifts::zero(2), &profile).unwrap();
        let point = random_tensor(21, 2, 16, 16, 300.0, 900.0);
        let rep = crate::autodiff::grad_check("total_loss", &point, 1e-5, |g, x| {
            let nodes = build_total_loss(g, x, &prep, &profile)?;
            Ok(nodes.total)
        })
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "rel err {}", rep.max_rel_error);
    }
}
