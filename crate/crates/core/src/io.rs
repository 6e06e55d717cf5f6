//! Persistence and configuration: the binary tensor format, the flat
//! key = value run configuration, and 8-bit PPM previews. All file writes
//! go through a temp-file rename so readers never see partial output.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Read;
use std::path::{Path, PathBuf};

use crate::adapt::{AdaptMode, ShiftHandling};
use crate::error::{Error, Result};
use crate::resample::SensorProfile;
use crate::synth::ContentMix;
use crate::tensor::ImageTensor;

static TMP_COUNTER: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);

/// Writes via a temporary file in the same directory, then renames.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let stem = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
    let tag = TMP_COUNTER.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
    let tmp = dir.join(format!(".{stem}.{}.{tag}.tmp", std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path.display().to_string(), e)
    })
}

// ---------------------------------------------------------------------------
// Tensor files: magic "PZT1", version, bands, height, width, dtype, payload
// ---------------------------------------------------------------------------

const TENSOR_MAGIC: &[u8; 4] = b"PZT1";
const TENSOR_VERSION: u32 = 1;
const DTYPE_F32: u32 = 0;
const DTYPE_F64: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorDtype {
    F32,
    F64,
}

fn write_tensor_with(path: &Path, t: &ImageTensor, dtype: TensorDtype) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + t.len() * 8);
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    buf.extend_from_slice(&(t.bands() as u32).to_le_bytes());
    buf.extend_from_slice(&(t.height() as u32).to_le_bytes());
    buf.extend_from_slice(&(t.width() as u32).to_le_bytes());
    match dtype {
        TensorDtype::F32 => {
            buf.extend_from_slice(&DTYPE_F32.to_le_bytes());
            for &v in t.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        TensorDtype::F64 => {
            buf.extend_from_slice(&DTYPE_F64.to_le_bytes());
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    atomic_write(path, &buf)
}

/// Lossless f64 tensor write.
pub fn write_tensor(path: &Path, t: &ImageTensor) -> Result<()> {
    write_tensor_with(path, t, TensorDtype::F64)
}

/// f32 tensor write; samples round to the nearest f32.
pub fn write_tensor_f32(path: &Path, t: &ImageTensor) -> Result<()> {
    write_tensor_with(path, t, TensorDtype::F32)
}

pub fn read_tensor(path: &Path) -> Result<ImageTensor> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf).map_err(|e| Error::io(path.display().to_string(), e))?;
    let fail = |reason: String| Error::Format { path: path.display().to_string(), reason };
    if buf.len() < 24 {
        return Err(fail("file shorter than header".into()));
    }
    if &buf[0..4] != TENSOR_MAGIC {
        return Err(fail("bad magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(buf[4 * i..4 * i + 4].try_into().unwrap());
    let version = word(1);
    if version != TENSOR_VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let bands = word(2) as usize;
    let height = word(3) as usize;
    let width = word(4) as usize;
    let dtype = word(5);
    let n = bands * height * width;
    let sample_size = match dtype {
        DTYPE_F32 => 4,
        DTYPE_F64 => 8,
        other => return Err(fail(format!("unknown dtype code {other}"))),
    };
    if buf.len() != 24 + n * sample_size {
        return Err(fail(format!(
            "payload length {} does not match declared shape ({} expected)",
            buf.len() - 24,
            n * sample_size
        )));
    }
    let data: Vec<f64> = match dtype {
        DTYPE_F32 => buf[24..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        _ => buf[24..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    ImageTensor::new(bands, height, width, data).map_err(|e| fail(format!("invalid payload: {e}")))
}

// ---------------------------------------------------------------------------
// Preview export: binary PPM with a 1-99 percentile stretch per band
// ---------------------------------------------------------------------------

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = (q * (sorted.len() - 1) as f64).round() as usize;
    sorted[idx]
}

/// Maps the selected band triplet to 8-bit RGB: the 1st percentile lands on
/// 0, the 99th on 255, linear in between; constant bands render mid-gray.
pub fn export_preview(t: &ImageTensor, rgb: (usize, usize, usize), path: &Path) -> Result<()> {
    let (h, w) = (t.height(), t.width());
    let channels = [rgb.0, rgb.1, rgb.2];
    let mut stretched: Vec<Vec<u8>> = Vec::with_capacity(3);
    for &b in &channels {
        let band = t.band(b)?;
        let mut sorted = band.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let lo = percentile(&sorted, 0.01);
        let hi = percentile(&sorted, 0.99);
        let plane: Vec<u8> = if hi <= lo {
            vec![128u8; band.len()]
        } else {
            band.iter()
                .map(|&v| (255.0 * (v - lo) / (hi - lo)).round().clamp(0.0, 255.0) as u8)
                .collect()
        };
        stretched.push(plane);
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for i in 0..h * w {
        for plane in &stretched {
            out.push(plane[i]);
        }
    }
    atomic_write(path, &out)
}

// ---------------------------------------------------------------------------
// Run configuration: flat key = value lines, '#' comments, unknown keys
// rejected, every required key present exactly once
// ---------------------------------------------------------------------------

const REQUIRED_KEYS: &[&str] = &[
    "ratio",
    "ms_gains",
    "pan_gain",
    "kernel_size",
    "sigma",
    "beta",
    "learning_rate",
    "seed",
    "mode",
];

const OPTIONAL_KEYS: &[&str] = &[
    "iterations",
    "shift_handling",
    "log_every",
    "width",
    "height",
    "dynamic_range",
    "detail_boost",
    "pan_weights",
    "misalign",
    "mix",
    "pan",
    "ms",
    "ground_truth",
    "weights_in",
    "weights_out",
    "output",
    "log",
    "report",
    "preview",
    "out_dir",
];

/// Input/output locations a subcommand may need; validated per command.
#[derive(Debug, Clone, Default)]
pub struct ConfigPaths {
    pub pan: Option<PathBuf>,
    pub ms: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
    pub weights_in: Option<PathBuf>,
    pub weights_out: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub preview: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

/// Scene-synthesis settings (only consulted by the synth command).
#[derive(Debug, Clone)]
pub struct SynthSettings {
    pub width: usize,
    pub height: usize,
    pub dynamic_range: f64,
    pub detail_boost: f64,
    pub pan_weights: Option<Vec<f64>>,
    pub misalign: Option<Vec<(i32, i32)>>,
    pub mix: ContentMix,
}

impl Default for SynthSettings {
    fn default() -> Self {
        SynthSettings {
            width: 256,
            height: 256,
            dynamic_range: 2048.0,
            detail_boost: 0.15,
            pan_weights: None,
            misalign: None,
            mix: ContentMix::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub profile: SensorProfile,
    pub seed: u64,
    pub mode: AdaptMode,
    /// Iteration budget override; commands fall back to their defaults
    /// (100 for adaptation, 2000 for pretraining) when absent.
    pub iterations: Option<u32>,
    pub shift_handling: ShiftHandling,
    pub log_every: u32,
    pub paths: ConfigPaths,
    pub synth: SynthSettings,
    entries: Vec<(String, String)>,
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::Config(format!("key '{key}': cannot parse '{value}'")))
}

fn parse_f64_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(|s| parse_num::<f64>(key, s.trim()))
        .collect()
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        RunConfig::parse(&text)
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut entries: Vec<(String, String)> = Vec::new();
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected 'key = value', got '{line}'", lineno + 1)));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if !REQUIRED_KEYS.contains(&key.as_str()) && !OPTIONAL_KEYS.contains(&key.as_str()) {
                return Err(Error::Config(format!("line {}: unknown key '{key}'", lineno + 1)));
            }
            if !seen.insert(key.clone()) {
                return Err(Error::Config(format!("line {}: duplicate key '{key}'", lineno + 1)));
            }
            entries.push((key, value));
        }
        for &req in REQUIRED_KEYS {
            if !seen.contains(req) {
                return Err(Error::Config(format!("missing required key '{req}'")));
            }
        }
        let get = |key: &str| entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str());

        let ms_gains = parse_f64_list("ms_gains", get("ms_gains").unwrap())?;
        let profile = SensorProfile {
            ratio: parse_num("ratio", get("ratio").unwrap())?,
            ms_nyquist_gains: ms_gains,
            pan_nyquist_gain: parse_num("pan_gain", get("pan_gain").unwrap())?,
            kernel_size: parse_num("kernel_size", get("kernel_size").unwrap())?,
            sigma: parse_num("sigma", get("sigma").unwrap())?,
            beta: parse_num("beta", get("beta").unwrap())?,
            learning_rate: parse_num("learning_rate", get("learning_rate").unwrap())?,
            adapt_iters: 100,
        };
        profile.validate().map_err(|e| Error::Config(e.to_string()))?;

        let mode = match get("mode").unwrap() {
            "full-resolution" => AdaptMode::FullResolution,
            "reduced-resolution-wald" => AdaptMode::ReducedResolutionWald,
            other => return Err(Error::Config(format!("mode must be 'full-resolution' or 'reduced-resolution-wald', got '{other}'"))),
        };
        let shift_handling = match get("shift_handling") {
            None => ShiftHandling::PreEstimated,
            Some("off") => ShiftHandling::Off,
            Some("pre-estimated") => ShiftHandling::PreEstimated,
            Some(other) => {
                return Err(Error::Config(format!("shift_handling must be 'off' or 'pre-estimated', got '{other}'")))
            }
        };
        let iterations = get("iterations").map(|v| parse_num::<u32>("iterations", v)).transpose()?;
        let log_every = get("log_every").map(|v| parse_num::<u32>("log_every", v)).transpose()?.unwrap_or(100);
        if log_every == 0 {
            return Err(Error::Config("log_every must be >= 1".into()));
        }

        let path_of = |key: &str| get(key).map(PathBuf::from);
        let paths = ConfigPaths {
            pan: path_of("pan"),
            ms: path_of("ms"),
            ground_truth: path_of("ground_truth"),
            weights_in: path_of("weights_in"),
            weights_out: path_of("weights_out"),
            output: path_of("output"),
            log: path_of("log"),
            report: path_of("report"),
            preview: path_of("preview"),
            out_dir: path_of("out_dir"),
        };

        let mut synth = SynthSettings::default();
        if let Some(v) = get("width") {
            synth.width = parse_num("width", v)?;
        }
        if let Some(v) = get("height") {
            synth.height = parse_num("height", v)?;
        }
        if let Some(v) = get("dynamic_range") {
            synth.dynamic_range = parse_num("dynamic_range", v)?;
        }
        if let Some(v) = get("detail_boost") {
            synth.detail_boost = parse_num("detail_boost", v)?;
        }
        if let Some(v) = get("pan_weights") {
            synth.pan_weights = Some(parse_f64_list("pan_weights", v)?);
        }
        if let Some(v) = get("misalign") {
            let mut pairs = Vec::new();
            for part in v.split(';') {
                let part = part.trim();
                let Some((dx, dy)) = part.split_once(',') else {
                    return Err(Error::Config(format!("misalign entry '{part}' must be 'dx,dy'")));
                };
                pairs.push((parse_num::<i32>("misalign", dx.trim())?, parse_num::<i32>("misalign", dy.trim())?));
            }
            synth.misalign = Some(pairs);
        }
        if let Some(v) = get("mix") {
            let parts = parse_f64_list("mix", v)?;
            if parts.len() != 4 {
                return Err(Error::Config("mix needs four weights: smooth,texture,rects,lines".into()));
            }
            synth.mix = ContentMix { smooth: parts[0], texture: parts[1], rects: parts[2], lines: parts[3] };
            synth.mix.validate().map_err(|e| Error::Config(e.to_string()))?;
        }

        Ok(RunConfig {
            profile,
            seed: parse_num("seed", get("seed").unwrap())?,
            mode,
            iterations,
            shift_handling,
            log_every,
            paths,
            synth,
            entries,
        })
    }

    /// The resolved key/value pairs, for echoing into JSON reports.
    pub fn echo(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        for (k, v) in &self.entries {
            map.insert(k.clone(), serde_json::Value::String(v.clone()));
        }
        serde_json::Value::Object(map)
    }

    /// Renders a config back to the flat text format.
    pub fn render(entries: &[(&str, String)]) -> String {
        let mut out = String::new();
        for (k, v) in entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn sample_config() -> String {
        "\
# sensor
ratio = 4
ms_gains = 0.29, 0.29, 0.29, 0.29
pan_gain = 0.15
kernel_size = 41
sigma = 4
beta = 0.36
learning_rate = 1e-5
seed = 7
mode = full-resolution
"
        .to_string()
    }

    #[test]
    fn tensor_roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pzt");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = ImageTensor::new(3, 5, 7, (0..105).map(|_| rng.random_range(-1e6..1e6)).collect()).unwrap();
        write_tensor(&path, &t).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn tensor_f32_bounded_rounding() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t32.pzt");
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = ImageTensor::new(2, 4, 4, (0..32).map(|_| rng.random_range(-2048.0..2048.0)).collect()).unwrap();
        write_tensor_f32(&path, &t).unwrap();
        let back = read_tensor(&path).unwrap();
        for (a, b) in t.data().iter().zip(back.data()) {
            let expected = *a as f32 as f64;
            assert_eq!(*b, expected);
            assert!((a - b).abs() <= (a.abs() * 2.0 * f32::EPSILON as f64));
        }
    }

    #[test]
    fn tensor_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pzt");
        let t = ImageTensor::constant(1, 2, 2, 5.0);
        write_tensor(&path, &t).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[1] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_tensor(&path), Err(Error::Format { .. })));

        write_tensor(&path, &t).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_tensor(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn preview_constant_image_is_uniform_gray() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ppm");
        let t = ImageTensor::constant(3, 4, 6, 42.0);
        export_preview(&t, (0, 1, 2), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = b"P6\n6 4\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 3 * 24);
        assert!(bytes[header.len()..].iter().all(|&b| b == 128));
    }

    #[test]
    fn preview_stretch_maps_percentiles() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ppm");
        // 0..9999 ramp: 1st percentile ~ 100, 99th ~ 9900
        let n = 10_000usize;
        let t = ImageTensor::new(1, 100, 100, (0..n).map(|i| i as f64).collect()).unwrap();
        export_preview(&t, (0, 0, 0), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header_len = b"P6\n100 100\n255\n".len();
        let px = |i: usize| bytes[header_len + 3 * i];
        assert_eq!(px(0), 0);
        assert_eq!(px(n - 1), 255);
        // the 1st/99th percentile samples sit within one level of the ends
        assert!(px(99) <= 1);
        assert!(px(9901) >= 254);
        assert!(export_preview(&t, (0, 3, 0), &path).is_err());
    }

    #[test]
    fn config_parses_and_echoes() {
        let cfg = RunConfig::parse(&sample_config()).unwrap();
        assert_eq!(cfg.profile.ratio, 4);
        assert_eq!(cfg.profile.bands(), 4);
        assert_eq!(cfg.profile.beta, 0.36);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.mode, AdaptMode::FullResolution);
        assert_eq!(cfg.shift_handling, ShiftHandling::PreEstimated);
        assert!(cfg.iterations.is_none());
        let echo = cfg.echo();
        assert_eq!(echo["beta"], "0.36");
        assert_eq!(echo["mode"], "full-resolution");
    }

    #[test]
    fn config_rejects_unknown_duplicate_and_missing_keys() {
        let unknown = sample_config() + "bogus = 1\n";
        assert!(matches!(RunConfig::parse(&unknown), Err(Error::Config(_))));
        let duplicate = sample_config() + "seed = 8\n";
        assert!(matches!(RunConfig::parse(&duplicate), Err(Error::Config(_))));
        let missing = sample_config().replace("beta = 0.36\n", "");
        assert!(matches!(RunConfig::parse(&missing), Err(Error::Config(_))));
    }

    #[test]
    fn config_parses_synth_extensions() {
        let cfg_text = sample_config()
            + "iterations = 25
width = 128
height = 64
pan_weights = 0.1, 0.2, 0.3, 0.4
misalign = 1,-2; 0,0; 3,1; -1,0
mix = 1, 0, 0, 0
detail_boost = 0.3
output = out/fused.pzt
";
        let cfg = RunConfig::parse(&cfg_text).unwrap();
        assert_eq!(cfg.iterations, Some(25));
        assert_eq!(cfg.synth.width, 128);
        assert_eq!(cfg.synth.height, 64);
        assert_eq!(cfg.synth.pan_weights.as_deref(), Some(&[0.1, 0.2, 0.3, 0.4][..]));
        assert_eq!(cfg.synth.misalign.as_deref(), Some(&[(1, -2), (0, 0), (3, 1), (-1, 0)][..]));
        assert_eq!(cfg.synth.mix.smooth, 1.0);
        assert_eq!(cfg.paths.output.as_deref(), Some(Path::new("out/fused.pzt")));
    }
}
