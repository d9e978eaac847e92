use std::collections::BTreeMap;
use std::fmt::Write as _;

use mctseg_tensor::{Scalar, Tensor, TensorError};
use rand::seq::SliceRandom;

use super::masks::{sample_modality_mask, MaskDist};
use super::optim::{adam_step, poly_lr, AdamConfig, OptimState};
use crate::data::{augment, center_crop, stream_rng, VolumeSample};
use crate::error::{Error, Result};
use crate::losses::{branch_losses, LossValues};
use crate::modality::ModalityMask;
use crate::model::{model_forward, Graph, Mode, ModelConfig, ParamStore, NUM_CLASSES};

// Disjoint stream ranges under the master seed.
const ORDER_STREAM: u64 = 1 << 40;
const STEP_STREAM: u64 = 2 << 40;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub crop: usize,
    pub epochs: usize,
    pub max_epoch: usize,
    pub initial_lr: f64,
    /// Exponent of the polynomial schedule.
    pub power: f64,
    pub adam: AdamConfig,
    pub lambda_mfd: f64,
    pub mask_dist: MaskDist,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            crop: 32,
            epochs: 120,
            max_epoch: 120,
            initial_lr: 1e-4,
            power: 0.9,
            adam: AdamConfig::default(),
            lambda_mfd: 1.0,
            mask_dist: MaskDist::Uniform15,
            augment: true,
            seed: 0,
        }
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState<T: Scalar> {
    pub params: ParamStore<T>,
    pub optim: OptimState<T>,
    /// Optimizer steps completed so far.
    pub step: u64,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(params: ParamStore<T>) -> Self {
        Self {
            params,
            optim: OptimState::new(),
            step: 0,
        }
    }
}

/// One row of the loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: u64,
    pub losses: LossValues,
    pub lr: f64,
    pub mask: ModalityMask,
}

pub const LOSS_CSV_HEADER: &str = "epoch,step,l_um,l_mm,l_seg,l_layer,l_mfd,l_total,lr";

impl LogRow {
    pub fn csv(&self) -> String {
        let l = &self.losses;
        let mut s = format!("{},{}", self.epoch, self.step);
        for v in [l.l_um, l.l_mm, l.l_seg, l.l_layer, l.l_mfd, l.l_total] {
            write!(s, ",{v:.6}").expect("string write");
        }
        write!(s, ",{:e}", self.lr).expect("string write");
        s
    }
}

/// Z-scores every sample (the training and evaluation input convention).
pub fn prepare_dataset(samples: &[VolumeSample]) -> Vec<VolumeSample> {
    samples.iter().map(VolumeSample::normalized).collect()
}

fn nan_at(step: u64) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Tensor(TensorError::NonFinite { .. }) => Error::NanLoss { step },
        other => other,
    }
}

/// Forward, loss, backward and Adam update on one (already augmented)
/// sample. Returns the loss values before the update.
pub fn train_step<T: Scalar>(
    cfg: &TrainConfig,
    state: &mut TrainState<T>,
    sample: &VolumeSample,
    mask: ModalityMask,
    weights: &[f64; NUM_CLASSES],
    lr: f64,
) -> Result<LossValues> {
    let step = state.step;
    let (values, grads) = {
        let mut g = Graph::new(&state.params, true);
        let images = sample.images.each_ref().map(|t| Some(t.cast::<T>()));
        let out = model_forward(&mut g, &cfg.model, &images, mask, Mode::Train).map_err(nan_at(step))?;
        let losses =
            branch_losses(&mut g.tape, &out, &sample.labels, mask, weights, cfg.lambda_mfd).map_err(nan_at(step))?;
        let values = losses.values(&g.tape);
        if !values.l_total.is_finite() {
            return Err(Error::NanLoss { step });
        }
        g.tape.backward(losses.l_total)?;
        (values, g.grads())
    };
    if grads.values().any(|t: &Tensor<T>| !t.all_finite()) {
        return Err(Error::NanLoss { step });
    }
    adam_step(&mut state.params, &grads, &mut state.optim, &cfg.adam, lr)?;
    state.step += 1;
    Ok(values)
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, ORDER_STREAM + epoch as u64));
    order
}

/// Runs from `state.step` up to `epochs * data.len()` steps. Every random
/// choice of step `s` comes from a stream keyed by `(seed, s)`, so a resumed
/// run retraces an uninterrupted one. `on_step` sees each log row and the
/// updated state (for logging and checkpointing).
pub fn train_loop<T: Scalar>(
    cfg: &TrainConfig,
    data: &[VolumeSample],
    state: &mut TrainState<T>,
    weights: &[f64; NUM_CLASSES],
    mut on_step: impl FnMut(&LogRow, &TrainState<T>) -> Result<()>,
) -> Result<Vec<LogRow>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = data.len();
    let total = (cfg.epochs * n) as u64;
    let mut log = Vec::new();
    let mut order: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    while state.step < total {
        let step = state.step;
        let epoch = (step / n as u64) as usize;
        let idx = order.entry(epoch).or_insert_with(|| epoch_order(cfg.seed, epoch, n))[(step % n as u64) as usize];
        let mut rng = stream_rng(cfg.seed, STEP_STREAM + step);
        let sample = if cfg.augment {
            augment(&data[idx], cfg.crop, &mut rng)?
        } else {
            center_crop(&data[idx], cfg.crop)?
        };
        let mask = sample_modality_mask(&mut rng, cfg.mask_dist);
        let lr = poly_lr(epoch, cfg.initial_lr, cfg.max_epoch, cfg.power);
        let losses = train_step(cfg, state, &sample, mask, weights, lr)?;
        let row = LogRow {
            epoch,
            step,
            losses,
            lr,
            mask,
        };
        on_step(&row, state)?;
        log.push(row);
        order.retain(|&e, _| e >= epoch);
    }
    Ok(log)
}
