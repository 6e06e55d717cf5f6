//! Ground-truth factory: generates full-resolution scenes and simulates the
//! acquisition operators so losses and metrics can be verified against a
//! known answer.
//!
//! Scene content mixes smooth gradients, low-frequency vegetation-like
//! texture (kept below the decimation Nyquist so the consistency premise
//! holds), rectangular structures, and fine lines. The PAN is a convex
//! band combination plus an optional PAN-exclusive detail boost.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::resample::{degrade, BandShifts, SensorProfile};
use crate::tensor::ImageTensor;

/// Relative weights of the four content classes.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ContentMix {
    pub smooth: f64,
    pub texture: f64,
    pub rects: f64,
    pub lines: f64,
}

impl Default for ContentMix {
    fn default() -> Self {
        ContentMix { smooth: 0.35, texture: 0.35, rects: 0.2, lines: 0.1 }
    }
}

impl ContentMix {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.smooth, self.texture, self.rects, self.lines];
        if parts.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::InvalidArgument("content mix weights must be >= 0".into()));
        }
        if parts.iter().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidArgument("content mix must have positive total weight".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    /// PAN-scale height and width; must be divisible by the profile ratio.
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub mix: ContentMix,
    /// Sample values land inside [0, dynamic_range).
    pub dynamic_range: f64,
}

impl SceneSpec {
    pub fn new(seed: u64, height: usize, width: usize, bands: usize) -> Self {
        SceneSpec { seed, height, width, bands, mix: ContentMix::default(), dynamic_range: 2048.0 }
    }

    pub fn validate(&self, ratio: usize) -> Result<()> {
        if self.bands < 1 {
            return Err(Error::InvalidArgument("at least one band required".into()));
        }
        if self.height % ratio != 0 {
            return Err(Error::NotDivisible { dim: "height", value: self.height, ratio });
        }
        if self.width % ratio != 0 {
            return Err(Error::NotDivisible { dim: "width", value: self.width, ratio });
        }
        if self.dynamic_range <= 0.0 {
            return Err(Error::InvalidArgument("dynamic range must be positive".into()));
        }
        self.mix.validate()
    }
}

/// Spectral weights combining MS bands into the PAN, plus an optional
/// PAN-exclusive high-frequency boost.
#[derive(Debug, Clone, PartialEq)]
pub struct PanWeights {
    weights: Vec<f64>,
    pub detail_boost: f64,
}

impl PanWeights {
    pub fn new(weights: Vec<f64>, detail_boost: f64) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::InvalidArgument("pan weights must be nonnegative".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("pan weights must sum to 1, got {sum}")));
        }
        if detail_boost < 0.0 {
            return Err(Error::InvalidArgument("detail boost must be >= 0".into()));
        }
        Ok(PanWeights { weights, detail_boost })
    }

    pub fn uniform(bands: usize) -> Self {
        PanWeights { weights: vec![1.0 / bands as f64; bands], detail_boost: 0.0 }
    }

    pub fn with_boost(mut self, boost: f64) -> Result<Self> {
        if boost < 0.0 {
            return Err(Error::InvalidArgument("detail boost must be >= 0".into()));
        }
        self.detail_boost = boost;
        Ok(self)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

fn smooth_field(src: &[f64], h: usize, w: usize, radius: i64, passes: usize) -> Vec<f64> {
    let mut cur = src.to_vec();
    let norm = ((2 * radius + 1) * (2 * radius + 1)) as f64;
    for _ in 0..passes {
        let mut next = vec![0.0; h * w];
        for r in 0..h as i64 {
            for c in 0..w as i64 {
                let mut acc = 0.0;
                for dr in -radius..=radius {
                    for dc in -radius..=radius {
                        let rr = (r + dr).clamp(0, h as i64 - 1) as usize;
                        let cc = (c + dc).clamp(0, w as i64 - 1) as usize;
                        acc += cur[rr * w + cc];
                    }
                }
                next[(r as usize) * w + c as usize] = acc / norm;
            }
        }
        cur = next;
    }
    cur
}

fn normalize_unit(field: &mut [f64]) {
    let n = field.len() as f64;
    let mean = field.iter().sum::<f64>() / n;
    let var = field.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-12);
    for v in field.iter_mut() {
        *v = (*v - mean) / std;
    }
}

/// Deterministic multi-band scene with shared structure plus band-specific
/// vegetation-like divergence; inter-band correlation lands in [0.5, 0.95]
/// with later bands diverging most.
pub fn gen_scene(spec: &SceneSpec) -> Result<ImageTensor> {
    spec.mix.validate()?;
    if spec.bands < 1 || spec.dynamic_range <= 0.0 {
        return Err(Error::InvalidArgument("invalid scene spec".into()));
    }
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // smooth gradients: a few random low-frequency cosine sheets
    let mut smooth = vec![0.0; h * w];
    for _ in 0..4 {
        let fy = rng.random_range(0.3..1.6) / h as f64;
        let fx = rng.random_range(0.3..1.6) / w as f64;
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let amp = rng.random_range(0.5..1.0);
        for r in 0..h {
            for c in 0..w {
                smooth[r * w + c] +=
                    amp * (std::f64::consts::TAU * (fy * r as f64 + fx * c as f64) + phase).cos();
            }
        }
    }
    normalize_unit(&mut smooth);

    // vegetation-like texture: a coarse band-limited layer plus shared
    // fine grain. The fine grain is what the PAN contributes beyond the
    // interpolated MS, so the true scene out-correlates the reference field.
    let raw: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut coarse = smooth_field(&raw, h, w, 4, 2);
    normalize_unit(&mut coarse);
    let raw_fine: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut fine = smooth_field(&raw_fine, h, w, 1, 1);
    normalize_unit(&mut fine);
    let mut texture = vec![0.0; h * w];
    for i in 0..h * w {
        texture[i] = 0.35 * coarse[i] + 0.65 * fine[i];
    }
    normalize_unit(&mut texture);

    // rectangular structures
    let mut rects = vec![0.0; h * w];
    let n_rects = 3 + (h * w) / 2048;
    for _ in 0..n_rects {
        let rh = rng.random_range(h / 8..h / 2).max(4);
        let rw = rng.random_range(w / 8..w / 2).max(4);
        let r0 = rng.random_range(0..h.saturating_sub(rh).max(1));
        let c0 = rng.random_range(0..w.saturating_sub(rw).max(1));
        let amp = rng.random_range(-1.0..1.0);
        for r in r0..(r0 + rh).min(h) {
            for c in c0..(c0 + rw).min(w) {
                rects[r * w + c] += amp;
            }
        }
    }
    normalize_unit(&mut rects);

    // fine lines: thin horizontal/vertical strokes
    let mut lines = vec![0.0; h * w];
    let n_lines = 4 + (h + w) / 32;
    for _ in 0..n_lines {
        let amp = rng.random_range(-1.0..1.0);
        if rng.random_bool(0.5) {
            let r = rng.random_range(0..h);
            let c0 = rng.random_range(0..w / 2);
            let len = rng.random_range(w / 4..w - c0);
            for c in c0..c0 + len {
                lines[r * w + c] += amp;
            }
        } else {
            let c = rng.random_range(0..w);
            let r0 = rng.random_range(0..h / 2);
            let len = rng.random_range(h / 4..h - r0);
            for r in r0..r0 + len {
                lines[r * w + c] += amp;
            }
        }
    }
    normalize_unit(&mut lines);

    let mix_norm = spec.mix.smooth + spec.mix.texture + spec.mix.rects + spec.mix.lines;
    let mut base = vec![0.0; h * w];
    for i in 0..h * w {
        base[i] = (spec.mix.smooth * smooth[i]
            + spec.mix.texture * texture[i]
            + spec.mix.rects * rects[i]
            + spec.mix.lines * lines[i])
            / mix_norm;
    }
    normalize_unit(&mut base);

    // per-band: shared base plus band-specific low-frequency divergence;
    // later bands (vegetation-like) diverge most
    let mut data = Vec::with_capacity(spec.bands * h * w);
    for b in 0..spec.bands {
        // divergence wavelength sits far above the correlation patch size,
        // so it shifts local means (dropping out of patch correlations)
        // while still separating the bands globally
        let raw_b: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut diverge = smooth_field(&raw_b, h, w, 8, 2);
        normalize_unit(&mut diverge);
        let d = if spec.bands == 1 {
            0.0
        } else {
            0.28 + 0.34 * (b as f64 / (spec.bands - 1) as f64)
        };
        let gain = 1.0 - 0.06 * b as f64 / spec.bands.max(1) as f64;
        for i in 0..h * w {
            data.push(gain * (base[i] + d * diverge[i]));
        }
    }

    // map into [0.05, 0.95] of the dynamic range, same affine for all bands
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    let scale = 0.9 * spec.dynamic_range / span;
    for v in &mut data {
        *v = 0.05 * spec.dynamic_range + (*v - lo) * scale;
    }
    ImageTensor::new(spec.bands, h, w, data)
}

/// Everything `simulate_pair` produced, including the registration ground
/// truth that `estimate_band_shifts` is expected to recover.
#[derive(Debug, Clone)]
pub struct SimulatedPair {
    pub pan: ImageTensor,
    pub ms: ImageTensor,
    pub true_shifts: BandShifts,
}

/// Simulates the acquisition of (PAN, MS) from a ground-truth scene.
///
/// `misalign[b] = (dx, dy)` displaces band b's content by (-dx, -dy) before
/// degradation; equivalently (dx, dy) is the decimation-grid shift that
/// re-registers the band to the PAN, which is what the shift estimator
/// recovers and the spectral loss consumes.
pub fn simulate_pair(
    m0: &ImageTensor,
    profile: &SensorProfile,
    weights: &PanWeights,
    misalign: Option<&[(i32, i32)]>,
) -> Result<SimulatedPair> {
    if m0.bands() != weights.weights().len() {
        return Err(Error::ChannelMismatch { expected: weights.weights().len(), found: m0.bands() });
    }
    if m0.bands() != profile.bands() {
        return Err(Error::ChannelMismatch { expected: profile.bands(), found: m0.bands() });
    }
    let limit = profile.ratio as i32 - 1;
    if let Some(mis) = misalign {
        if mis.len() != m0.bands() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} misalignments", m0.bands()),
                found: format!("{}", mis.len()),
            });
        }
        for &(dx, dy) in mis {
            if dx.abs() > limit || dy.abs() > limit {
                return Err(Error::ShiftOutOfRange { dx: dx as i64, dy: dy as i64, limit: limit as i64 });
            }
        }
    }
    let (bands, h, w) = m0.shape();

    // PAN: convex spectral combination of the true scene
    let plane = h * w;
    let mut pan = vec![0.0f64; plane];
    for b in 0..bands {
        let wgt = weights.weights()[b];
        let src = &m0.data()[b * plane..(b + 1) * plane];
        for (p, &v) in pan.iter_mut().zip(src) {
            *p += wgt * v;
        }
    }
    if weights.detail_boost > 0.0 {
        // PAN-exclusive detail: residual of a small blur, so the PAN is not
        // exactly inside the band span
        let blurred = smooth_field(&pan, h, w, 2, 1);
        for (p, &s) in pan.iter_mut().zip(&blurred) {
            *p += weights.detail_boost * (*p - s);
        }
    }
    let pan = ImageTensor::new(1, h, w, pan)?;

    // MS branch: optional per-band content displacement, then degradation
    let mut shifted = m0.clone();
    let mut truth = vec![(0, 0); bands];
    if let Some(mis) = misalign {
        for (b, &(dx, dy)) in mis.iter().enumerate() {
            if dx != 0 || dy != 0 {
                shifted = shifted.translate_band(b, -dx as i64, -dy as i64)?;
            }
            truth[b] = (dx, dy);
        }
    }
    let ms = degrade(&shifted, profile)?;
    Ok(SimulatedPair { pan, ms, true_shifts: BandShifts::new(truth, profile.ratio)? })
}

/// Translates one low-resolution band with replicate fill, other bands
/// untouched.
pub fn inject_shift(m1: &ImageTensor, band: usize, dx: i64, dy: i64) -> Result<ImageTensor> {
    m1.translate_band(band, dx, dy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::{correlation_field, reference_field, spectral_loss};
    use crate::resample::estimate_band_shifts;

    fn profile() -> SensorProfile {
        SensorProfile::worldview_like(4)
    }

    #[test]
    fn gen_scene_is_seed_deterministic() {
        let spec = SceneSpec::new(5, 64, 64, 4);
        let a = gen_scene(&spec).unwrap();
        let b = gen_scene(&spec).unwrap();
        assert_eq!(a.data(), b.data());
        let c = gen_scene(&SceneSpec { seed: 6, ..spec }).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn gen_scene_respects_range_and_bands() {
        let spec = SceneSpec::new(1, 64, 64, 4);
        let scene = gen_scene(&spec).unwrap();
        assert_eq!(scene.shape(), (4, 64, 64));
        assert!(scene.min() >= 0.0);
        assert!(scene.max() < 2048.0);
        // single band allowed
        let one = gen_scene(&SceneSpec::new(1, 32, 32, 1)).unwrap();
        assert_eq!(one.bands(), 1);
    }

    #[test]
    fn gen_scene_interband_correlation_in_range() {
        for seed in 0..6 {
            let scene = gen_scene(&SceneSpec::new(seed, 96, 96, 4)).unwrap();
            let plane = 96 * 96;
            for a in 0..4 {
                for b in (a + 1)..4 {
                    let ca = &scene.data()[a * plane..(a + 1) * plane];
                    let cb = &scene.data()[b * plane..(b + 1) * plane];
                    let corr = crate::resample::global_correlation(ca, cb).unwrap();
                    assert!(
                        (0.5..=0.95).contains(&corr),
                        "seed {seed} bands ({a},{b}): corr {corr}"
                    );
                }
            }
        }
    }

    #[test]
    fn all_smooth_mix_has_lower_total_variation_than_textured() {
        let tv = |t: &ImageTensor| -> f64 {
            let (bands, h, w) = t.shape();
            let mut acc = 0.0;
            for b in 0..bands {
                for r in 0..h - 1 {
                    for c in 0..w - 1 {
                        acc += (t.at(b, r + 1, c) - t.at(b, r, c)).abs() + (t.at(b, r, c + 1) - t.at(b, r, c)).abs();
                    }
                }
            }
            acc / (bands * (h - 1) * (w - 1)) as f64
        };
        let smooth_spec = SceneSpec {
            mix: ContentMix { smooth: 1.0, texture: 0.0, rects: 0.0, lines: 0.0 },
            ..SceneSpec::new(3, 64, 64, 2)
        };
        let textured_spec = SceneSpec {
            mix: ContentMix { smooth: 0.0, texture: 0.6, rects: 0.25, lines: 0.15 },
            ..SceneSpec::new(3, 64, 64, 2)
        };
        let tv_smooth = tv(&gen_scene(&smooth_spec).unwrap());
        let tv_textured = tv(&gen_scene(&textured_spec).unwrap());
        assert!(tv_smooth < tv_textured, "{tv_smooth} vs {tv_textured}");
    }

    #[test]
    fn simulate_pair_one_hot_weights_copy_band() {
        let scene = gen_scene(&SceneSpec::new(7, 64, 64, 4)).unwrap();
        let weights = PanWeights::new(vec![0.0, 0.0, 1.0, 0.0], 0.0).unwrap();
        let pair = simulate_pair(&scene, &profile(), &weights, None).unwrap();
        assert_eq!(pair.pan.data(), scene.band(2).unwrap());
    }

    #[test]
    fn simulate_pair_without_misalign_matches_degrade() {
        let scene = gen_scene(&SceneSpec::new(8, 64, 64, 4)).unwrap();
        let pair = simulate_pair(&scene, &profile(), &PanWeights::uniform(4), None).unwrap();
        let direct = degrade(&scene, &profile()).unwrap();
        assert_eq!(pair.ms.data(), direct.data());
        assert!(pair.true_shifts.is_zero());
    }

    #[test]
    fn simulate_pair_pan_is_convex_combination() {
        let scene = gen_scene(&SceneSpec::new(9, 32, 32, 3)).unwrap();
        let p = SensorProfile { ms_nyquist_gains: vec![0.29; 3], ..profile() };
        let weights = PanWeights::new(vec![0.2, 0.5, 0.3], 0.0).unwrap();
        let pair = simulate_pair(&scene, &p, &weights, None).unwrap();
        for i in 0..32 * 32 {
            let (r, c) = (i / 32, i % 32);
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for b in 0..3 {
                lo = lo.min(scene.at(b, r, c));
                hi = hi.max(scene.at(b, r, c));
            }
            let v = pair.pan.at(0, r, c);
            assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
        }
    }

    #[test]
    fn pan_weights_validation() {
        assert!(PanWeights::new(vec![0.5, 0.6], 0.0).is_err());
        assert!(PanWeights::new(vec![0.5, -0.5, 1.0], 0.0).is_err());
        assert!(PanWeights::new(vec![0.25; 4], -1.0).is_err());
        assert!(PanWeights::new(vec![0.25; 4], 0.3).is_ok());
    }

    #[test]
    fn inject_shift_identity_and_inverse() {
        let scene = gen_scene(&SceneSpec::new(10, 32, 32, 2)).unwrap();
        let p = SensorProfile { ms_nyquist_gains: vec![0.29; 2], ..profile() };
        let m1 = degrade(&scene, &p).unwrap();
        let same = inject_shift(&m1, 0, 0, 0).unwrap();
        assert_eq!(same.data(), m1.data());
        let moved = inject_shift(&m1, 1, 2, -1).unwrap();
        let back = inject_shift(&moved, 1, -2, 1).unwrap();
        for r in 1..7 {
            for c in 0..6 {
                assert_eq!(back.at(1, r, c), m1.at(1, r, c), "({r},{c})");
            }
        }
        assert!(inject_shift(&m1, 5, 1, 1).is_err());
    }

    #[test]
    fn misaligned_pair_recovers_injected_shift_and_loss_drops() {
        let scene = gen_scene(&SceneSpec::new(11, 128, 128, 4)).unwrap();
        let p = profile();
        let weights = PanWeights::uniform(4);
        let misalign = [(2, -1), (0, 0), (-3, 2), (1, 3)];
        let pair = simulate_pair(&scene, &p, &weights, Some(&misalign)).unwrap();
        assert_eq!(pair.true_shifts.offsets(), &misalign);
        let est = estimate_band_shifts(&pair.ms, &pair.pan, &p).unwrap();
        assert_eq!(est.shifts.offsets(), &misalign, "recovered {:?}", est.shifts.offsets());

        let with_truth = spectral_loss(&scene, &pair.ms, &pair.true_shifts, &p).unwrap();
        let with_zero = spectral_loss(&scene, &pair.ms, &BandShifts::zero(4), &p).unwrap();
        assert!(with_truth < with_zero, "{with_truth} vs {with_zero}");
    }

    #[test]
    fn consistency_premise_holds_on_clean_scenes() {
        let scene = gen_scene(&SceneSpec::new(12, 128, 128, 4)).unwrap();
        let p = profile();
        let pair = simulate_pair(&scene, &p, &PanWeights::uniform(4), None).unwrap();
        // spectral consistency: the true scene explains the MS exactly
        let loss = spectral_loss(&scene, &pair.ms, &pair.true_shifts, &p).unwrap();
        assert!(loss < 1e-6 * 2048.0, "loss {loss}");
        // spatial consistency: the true scene correlates with the PAN above
        // the reference field almost everywhere
        let field = correlation_field(&pair.pan, &scene, p.sigma).unwrap();
        let reference = reference_field(&pair.pan, &pair.ms, &p).unwrap();
        let mut above = 0usize;
        let mut valid = 0usize;
        for i in 0..field.rho_data().len() {
            if field.valid_data()[i] {
                valid += 1;
                if field.rho_data()[i] >= reference.rho_data()[i] {
                    above += 1;
                }
            }
        }
        assert!(valid > 0);
        let frac = above as f64 / valid as f64;
        assert!(frac >= 0.95, "only {frac:.3} of valid sites at or above reference");
    }

    #[test]
    fn simulate_pair_is_linear_for_fixed_weights_no_boost() {
        let a = gen_scene(&SceneSpec::new(13, 32, 32, 2)).unwrap();
        let b = gen_scene(&SceneSpec::new(14, 32, 32, 2)).unwrap();
        let p = SensorProfile { ms_nyquist_gains: vec![0.29; 2], ..profile() };
        let weights = PanWeights::new(vec![0.3, 0.7], 0.0).unwrap();
        let combo_data: Vec<f64> = a.data().iter().zip(b.data()).map(|(&x, &y)| 0.25 * x + 0.5 * y).collect();
        let combo = ImageTensor::new(2, 32, 32, combo_data).unwrap();
        let pa = simulate_pair(&a, &p, &weights, None).unwrap();
        let pb = simulate_pair(&b, &p, &weights, None).unwrap();
        let pc = simulate_pair(&combo, &p, &weights, None).unwrap();
        for i in 0..pc.pan.len() {
            let expected = 0.25 * pa.pan.data()[i] + 0.5 * pb.pan.data()[i];
            assert!((pc.pan.data()[i] - expected).abs() < 1e-9);
        }
        for i in 0..pc.ms.len() {
            let expected = 0.25 * pa.ms.data()[i] + 0.5 * pb.ms.data()[i];
            assert!((pc.ms.data()[i] - expected).abs() < 1e-9);
        }
    }
}
