//! Planar multi-band rasters: the value type every stage of the pipeline
//! passes around. Samples are stored band-major `(band, row, col)` as `f64`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    bands: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    /// Builds a tensor, validating length and finiteness.
    pub fn new(bands: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != bands * height * width {
            return Err(Error::ShapeMismatch {
                expected: format!("{} samples for ({bands}, {height}, {width})", bands * height * width),
                found: format!("{}", data.len()),
            });
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("ImageTensor::new (sample {bad})"),
                iteration: None,
            });
        }
        Ok(ImageTensor { bands, height, width, data })
    }

    /// Internal constructor for values produced by already-checked arithmetic.
    pub(crate) fn from_parts(bands: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), bands * height * width);
        ImageTensor { bands, height, width, data }
    }

    pub fn zeros(bands: usize, height: usize, width: usize) -> Self {
        ImageTensor { bands, height, width, data: vec![0.0; bands * height * width] }
    }

    pub fn constant(bands: usize, height: usize, width: usize, value: f64) -> Self {
        ImageTensor { bands, height, width, data: vec![value; bands * height * width] }
    }

    /// 1x1x1 tensor holding a single scalar.
    pub fn scalar(value: f64) -> Self {
        ImageTensor { bands: 1, height: 1, width: 1, data: vec![value] }
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.bands, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// True when this tensor holds exactly one sample.
    pub fn is_scalar(&self) -> bool {
        self.bands == 1 && self.height == 1 && self.width == 1
    }

    pub fn scalar_value(&self) -> Option<f64> {
        if self.is_scalar() {
            Some(self.data[0])
        } else {
            None
        }
    }

    #[inline]
    pub fn at(&self, band: usize, row: usize, col: usize) -> f64 {
        debug_assert!(band < self.bands && row < self.height && col < self.width);
        self.data[(band * self.height + row) * self.width + col]
    }

    #[inline]
    pub(crate) fn set(&mut self, band: usize, row: usize, col: usize, value: f64) {
        debug_assert!(band < self.bands && row < self.height && col < self.width);
        self.data[(band * self.height + row) * self.width + col] = value;
    }

    /// Sample with indices clamped into range (replicate extension).
    #[inline]
    pub fn at_clamped(&self, band: usize, row: i64, col: i64) -> f64 {
        let r = row.clamp(0, self.height as i64 - 1) as usize;
        let c = col.clamp(0, self.width as i64 - 1) as usize;
        self.at(band, r, c)
    }

    pub fn band(&self, band: usize) -> Result<&[f64]> {
        if band >= self.bands {
            return Err(Error::BandOutOfRange { index: band, bands: self.bands });
        }
        let plane = self.height * self.width;
        Ok(&self.data[band * plane..(band + 1) * plane])
    }

    /// Extracts one band as a single-band tensor.
    pub fn extract_band(&self, band: usize) -> Result<ImageTensor> {
        Ok(ImageTensor::from_parts(1, self.height, self.width, self.band(band)?.to_vec()))
    }

    /// Stacks single- or multi-band tensors of equal spatial size along bands.
    pub fn stack_bands(parts: &[&ImageTensor]) -> Result<ImageTensor> {
        let first = parts.first().ok_or_else(|| Error::InvalidArgument("stack_bands: empty list".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::new();
        let mut bands = 0;
        for p in parts {
            if p.height != h || p.width != w {
                return Err(Error::ShapeMismatch {
                    expected: format!("spatial size {h}x{w}"),
                    found: format!("{}x{}", p.height, p.width),
                });
            }
            bands += p.bands;
            data.extend_from_slice(&p.data);
        }
        Ok(ImageTensor::from_parts(bands, h, w, data))
    }

    /// Spatial crop (all bands), no clamping: the window must be in range.
    pub fn crop(&self, row0: usize, col0: usize, height: usize, width: usize) -> Result<ImageTensor> {
        if row0 + height > self.height || col0 + width > self.width {
            return Err(Error::InvalidArgument(format!(
                "crop window ({row0},{col0})+{height}x{width} exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(self.bands * height * width);
        for b in 0..self.bands {
            for r in 0..height {
                let base = (b * self.height + row0 + r) * self.width + col0;
                data.extend_from_slice(&self.data[base..base + width]);
            }
        }
        Ok(ImageTensor::from_parts(self.bands, height, width, data))
    }

    /// Translation with replicate fill: content moves by (+dx, +dy)
    /// (positive = right/down). Applied to every band.
    pub fn translate(&self, dx: i64, dy: i64) -> ImageTensor {
        let mut out = ImageTensor::zeros(self.bands, self.height, self.width);
        for b in 0..self.bands {
            for r in 0..self.height {
                for c in 0..self.width {
                    out.set(b, r, c, self.at_clamped(b, r as i64 - dy, c as i64 - dx));
                }
            }
        }
        out
    }

    /// Translates a single band in place semantics (other bands untouched).
    pub fn translate_band(&self, band: usize, dx: i64, dy: i64) -> Result<ImageTensor> {
        if band >= self.bands {
            return Err(Error::BandOutOfRange { index: band, bands: self.bands });
        }
        let mut out = self.clone();
        for r in 0..self.height {
            for c in 0..self.width {
                out.set(band, r, c, self.at_clamped(band, r as i64 - dy, c as i64 - dx));
            }
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageTensor {
        ImageTensor::from_parts(self.bands, self.height, self.width, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Max absolute difference; errors on shape mismatch.
    pub fn max_abs_diff(&self, other: &ImageTensor) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn check_same_shape(&self, other: &ImageTensor) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", self.shape()),
                found: format!("{:?}", other.shape()),
            });
        }
        Ok(())
    }
}
