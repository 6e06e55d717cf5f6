//! Training orchestration: full-resolution pretraining, target-adaptive
//! fine-tuning, and the reduced-resolution baseline path.
//!
//! Both modes run the same loop: build the forward graph, evaluate the
//! mode's loss, backpropagate, clip the global gradient norm, take one Adam
//! step. The whole target image is a one-sample batch. In reduced-resolution
//! mode both inputs are downgraded once up front and the full-resolution PAN
//! is never read again; an access counter recorded in the log proves it.

use std::cell::Cell;
use std::path::Path;
use std::time::Instant;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::loss::{build_total_loss, breakdown_from, LossBreakdown, LossPrep};
use crate::network::{
    adam_step, build_forward, prepare_inputs, save_params, AdamState, NetworkParams, ParamGrads,
};
use crate::resample::{degrade, degrade_pan, estimate_band_shifts, BandShifts, SensorProfile};
use crate::tensor::ImageTensor;

/// Default fine-tuning budget for target adaptation.
pub const DEFAULT_ADAPT_ITERATIONS: u32 = 100;
/// Default budget for the full-resolution pretraining phase.
pub const DEFAULT_PRETRAIN_ITERATIONS: u32 = 2000;
/// Global gradient-norm cap applied before every optimizer step.
pub const GRADIENT_CLIP_NORM: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptMode {
    FullResolution,
    ReducedResolutionWald,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftHandling {
    Off,
    PreEstimated,
}

#[derive(Debug, Clone)]
pub struct AdaptConfig {
    pub mode: AdaptMode,
    pub iterations: u32,
    pub learning_rate: f64,
    pub seed: u64,
    pub shift_handling: ShiftHandling,
    /// Checkpoint cadence during pretraining; losses log every iteration.
    pub log_every: u32,
}

impl AdaptConfig {
    pub fn for_profile(profile: &SensorProfile) -> Self {
        AdaptConfig {
            mode: AdaptMode::FullResolution,
            iterations: DEFAULT_ADAPT_ITERATIONS,
            learning_rate: profile.learning_rate,
            seed: 0,
            shift_handling: ShiftHandling::PreEstimated,
            log_every: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if self.log_every == 0 {
            return Err(Error::InvalidArgument("log_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// One training iteration: the loss before the step, wall-clock seconds,
/// and the degradation bookkeeping used by the mode-contract checks.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub iter: u32,
    pub loss: LossBreakdown,
    pub seconds: f64,
    /// Resolution downgrades built into this iteration's loss graph.
    pub degrade_calls: u32,
    /// True when every downgrade consumed the network output node.
    pub degrade_on_output: bool,
}

impl IterationRecord {
    /// The JSONL line format of the training log.
    pub fn jsonl(&self) -> String {
        serde_json::json!({
            "iter": self.iter,
            "spectral": self.loss.spectral,
            "spatial": self.loss.spatial,
            "total": self.loss.total,
            "seconds": self.seconds,
        })
        .to_string()
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub iterations: Vec<IterationRecord>,
    /// Band shifts used by the spectral term.
    pub final_shifts: Vec<(i32, i32)>,
    /// Reads of the full-resolution PAN while inputs were being prepared.
    pub pan_reads_setup: u64,
    /// Reads of the full-resolution PAN after setup (0 in reduced mode).
    pub pan_reads_loop: u64,
}

pub struct AdaptOutcome {
    pub params: NetworkParams,
    pub log: TrainLog,
    /// Pansharpened output at full resolution in full-resolution mode; the
    /// reduced-scale reconstruction in Wald mode.
    pub output: ImageTensor,
}

/// Read-counting wrapper proving when the full-resolution PAN stops being
/// consulted.
struct WatchedTensor<'a> {
    tensor: &'a ImageTensor,
    reads: Cell<u64>,
}

impl<'a> WatchedTensor<'a> {
    fn new(tensor: &'a ImageTensor) -> Self {
        WatchedTensor { tensor, reads: Cell::new(0) }
    }

    fn get(&self) -> &ImageTensor {
        self.reads.set(self.reads.get() + 1);
        self.tensor
    }

    fn reads(&self) -> u64 {
        self.reads.get()
    }
}

/// Wald downgrading: both inputs drop one resolution level with their own
/// MTF gains, after which the original MS serves as reference.
pub fn wald_downgrade(m1: &ImageTensor, p0: &ImageTensor, profile: &SensorProfile) -> Result<(ImageTensor, ImageTensor)> {
    Ok((degrade(m1, profile)?, degrade_pan(p0, profile)?))
}

enum LossKind {
    Full(Box<LossPrep>),
    ReducedL1 { target: ImageTensor, beta: f64 },
}

struct LoopSetup {
    stacked: ImageTensor,
    skip: ImageTensor,
    loss: LossKind,
}

fn run_loop(
    params: &mut NetworkParams,
    setup: &LoopSetup,
    profile: &SensorProfile,
    config: &AdaptConfig,
    mut on_checkpoint: impl FnMut(u32, &NetworkParams) -> Result<()>,
) -> Result<Vec<IterationRecord>> {
    let mut records = Vec::with_capacity(config.iterations as usize);
    let mut state = AdamState::new(params);
    for iter in 0..config.iterations {
        let started = Instant::now();
        let mut g = Graph::new();
        let x = g.constant(setup.stacked.clone());
        let skip = g.constant(setup.skip.clone());
        let fg = build_forward(&mut g, params, x, Some(skip).filter(|_| params.arch.residual_skip))?;
        let (loss_node, breakdown, degrade_calls, degrade_on_output) = match &setup.loss {
            LossKind::Full(prep) => {
                let nodes = build_total_loss(&mut g, fg.output, prep, profile)?;
                let breakdown = breakdown_from(&g, &nodes, profile.beta)?;
                let on_output = nodes.stats.degrade_input == Some(fg.output);
                (nodes.total, breakdown, nodes.stats.degrade_calls, on_output)
            }
            LossKind::ReducedL1 { target, beta } => {
                let t = g.constant(target.clone());
                let diff = g.sub(fg.output, t)?;
                let absdiff = g.abs(diff);
                let mean = g.reduce_mean(absdiff);
                let spectral = g.scalar(mean)?;
                let breakdown = LossBreakdown { spectral, spatial: 0.0, total: spectral + beta * 0.0, beta: *beta };
                (mean, breakdown, 0, true)
            }
        };
        if !breakdown.total.is_finite() {
            return Err(Error::NonFinite { context: "training loss".into(), iteration: Some(iter) });
        }
        let grads = g.backward(loss_node)?;
        let mut pg = ParamGrads::from_graph(&g, &grads, &fg)?;
        if !pg.all_finite() {
            return Err(Error::NonFinite { context: "training gradients".into(), iteration: Some(iter) });
        }
        pg.clip_global_norm(GRADIENT_CLIP_NORM);
        adam_step(params, &pg, &mut state, config.learning_rate)
            .map_err(|e| match e {
                Error::NonFinite { context, .. } => Error::NonFinite { context, iteration: Some(iter) },
                other => other,
            })?;
        records.push(IterationRecord {
            iter,
            loss: breakdown,
            seconds: started.elapsed().as_secs_f64(),
            degrade_calls,
            degrade_on_output,
        });
        if (iter + 1) % config.log_every == 0 {
            on_checkpoint(iter + 1, params)?;
        }
    }
    Ok(records)
}

fn final_forward(params: &NetworkParams, setup: &LoopSetup) -> Result<ImageTensor> {
    let mut g = Graph::new();
    let x = g.constant(setup.stacked.clone());
    let skip = g.constant(setup.skip.clone());
    let fg = build_forward(&mut g, params, x, Some(skip).filter(|_| params.arch.residual_skip))?;
    Ok(g.tensor(fg.output).clone())
}

fn check_pair_dims(m1: &ImageTensor, p0: &ImageTensor, profile: &SensorProfile) -> Result<()> {
    if p0.bands() != 1 {
        return Err(Error::ChannelMismatch { expected: 1, found: p0.bands() });
    }
    if m1.bands() != profile.bands() {
        return Err(Error::ChannelMismatch { expected: profile.bands(), found: m1.bands() });
    }
    if p0.height() != m1.height() * profile.ratio || p0.width() != m1.width() * profile.ratio {
        return Err(Error::ShapeMismatch {
            expected: format!("PAN {}x{}", m1.height() * profile.ratio, m1.width() * profile.ratio),
            found: format!("{}x{}", p0.height(), p0.width()),
        });
    }
    Ok(())
}

/// Fine-tunes the network on the target pair and pansharpens it with the
/// updated weights. Runs exactly `config.iterations` Adam steps; zero
/// iterations returns the input weights' forward pass unchanged.
pub fn target_adapt(
    params: &NetworkParams,
    m1: &ImageTensor,
    p0: &ImageTensor,
    profile: &SensorProfile,
    config: &AdaptConfig,
) -> Result<AdaptOutcome> {
    target_adapt_with(params, m1, p0, profile, config, |_, _| Ok(()))
}

fn target_adapt_with(
    params: &NetworkParams,
    m1: &ImageTensor,
    p0: &ImageTensor,
    profile: &SensorProfile,
    config: &AdaptConfig,
    on_checkpoint: impl FnMut(u32, &NetworkParams) -> Result<()>,
) -> Result<AdaptOutcome> {
    profile.validate()?;
    config.validate()?;
    check_pair_dims(m1, p0, profile)?;
    let watched = WatchedTensor::new(p0);

    let (setup, shifts) = match config.mode {
        AdaptMode::FullResolution => {
            let shifts = match config.shift_handling {
                ShiftHandling::Off => BandShifts::zero(m1.bands()),
                ShiftHandling::PreEstimated => estimate_band_shifts(m1, watched.get(), profile)?.shifts,
            };
            let prep = LossPrep::new(watched.get(), m1, shifts.clone(), profile)?;
            let (stacked, skip) = prepare_inputs(m1, watched.get(), profile.ratio)?;
            (LoopSetup { stacked, skip, loss: LossKind::Full(Box::new(prep)) }, shifts)
        }
        AdaptMode::ReducedResolutionWald => {
            // downgrade once; the full-resolution PAN is not consulted again
            let (m2, p1) = wald_downgrade(m1, watched.get(), profile)?;
            let (stacked, skip) = prepare_inputs(&m2, &p1, profile.ratio)?;
            (
                LoopSetup { stacked, skip, loss: LossKind::ReducedL1 { target: m1.clone(), beta: profile.beta } },
                BandShifts::zero(m1.bands()),
            )
        }
    };
    let pan_reads_setup = watched.reads();

    let mut adapted = params.clone();
    let records = run_loop(&mut adapted, &setup, profile, config, on_checkpoint)?;
    let output = final_forward(&adapted, &setup)?;
    let pan_reads_loop = watched.reads() - pan_reads_setup;

    Ok(AdaptOutcome {
        params: adapted,
        log: TrainLog {
            iterations: records,
            final_shifts: shifts.offsets().to_vec(),
            pan_reads_setup,
            pan_reads_loop,
        },
        output,
    })
}

/// Full-resolution pretraining on one training scene: the adaptation loop
/// with the pretraining budget, checkpointing every `log_every` iterations
/// to `checkpoint` (latest good state wins).
pub fn pretrain(
    params: &NetworkParams,
    m1: &ImageTensor,
    p0: &ImageTensor,
    profile: &SensorProfile,
    config: &AdaptConfig,
    checkpoint: Option<&Path>,
) -> Result<AdaptOutcome> {
    let mut cfg = config.clone();
    cfg.mode = AdaptMode::FullResolution;
    target_adapt_with(params, m1, p0, profile, &cfg, |_iter, p| {
        if let Some(path) = checkpoint {
            save_params(p, path)?;
        }
        Ok(())
    })
}

/// Axis-aligned window on the PAN grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropWindow {
    pub row0: usize,
    pub col0: usize,
    pub height: usize,
    pub width: usize,
}

/// Adapts on a crop of the target ("zoom" mode): the window must sit on the
/// ratio grid and cover at least 32x32 PAN pixels.
pub fn crop_adapt(
    params: &NetworkParams,
    m1: &ImageTensor,
    p0: &ImageTensor,
    window: CropWindow,
    profile: &SensorProfile,
    config: &AdaptConfig,
) -> Result<AdaptOutcome> {
    let r = profile.ratio;
    check_pair_dims(m1, p0, profile)?;
    if window.row0 % r != 0 || window.col0 % r != 0 {
        return Err(Error::InvalidArgument(format!(
            "crop origin ({}, {}) must align to the ratio grid (R = {r})",
            window.row0, window.col0
        )));
    }
    if window.height % r != 0 || window.width % r != 0 {
        return Err(Error::NotDivisible { dim: "crop size", value: window.height.max(window.width), ratio: r });
    }
    if window.height < 32 || window.width < 32 {
        return Err(Error::InvalidArgument(format!(
            "crop window {}x{} below the 32x32 PAN-scale minimum",
            window.height, window.width
        )));
    }
    if window.row0 + window.height > p0.height() || window.col0 + window.width > p0.width() {
        return Err(Error::InvalidArgument("crop window exceeds the PAN extent".into()));
    }
    let p0c = p0.crop(window.row0, window.col0, window.height, window.width)?;
    let m1c = m1.crop(window.row0 / r, window.col0 / r, window.height / r, window.width / r)?;
    target_adapt(params, &m1c, &p0c, profile, config)
}
