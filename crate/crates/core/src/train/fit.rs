use rand::seq::SliceRandom;

use super::{dice_loss, lr_at, HistoryRow, TrainConfig, TrainError, TrainState};
use crate::data::{sample_rng, stack, AugmentParams, Prepared};
use crate::model::{Mode, Network};
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor};

/// Reported after every completed epoch.
pub struct EpochEvent<'a> {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub improved: bool,
    pub network: &'a Network<f32>,
    pub state: &'a TrainState,
}

#[derive(Debug)]
pub struct FitOutcome {
    pub history: Vec<HistoryRow>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    /// Weights after the final epoch; the network itself holds the best ones.
    pub last: ParamStore<f32>,
    pub state: TrainState,
}

fn batch_tensors(items: &[&Prepared], augment: Option<(u64, usize, &[usize])>) -> Result<(Tensor, Tensor), TrainError> {
    let mut images = Vec::with_capacity(items.len());
    let mut targets = Vec::with_capacity(items.len());
    for (k, p) in items.iter().enumerate() {
        match augment {
            Some((seed, epoch, indices)) => {
                let params = AugmentParams::sample(&mut sample_rng(seed, epoch, indices[k]));
                let (img, mask) = params.apply(&p.image, &p.target);
                images.push(img);
                targets.push(mask.into_tensor());
            }
            None => {
                images.push(p.image.clone());
                targets.push(p.target.tensor().clone());
            }
        }
    }
    let images = stack(&images.iter().collect::<Vec<_>>())?;
    let targets = stack(&targets.iter().collect::<Vec<_>>())?;
    Ok((images, targets))
}

/// Mean Dice loss of `data` in evaluation mode, weighted by batch size.
pub fn evaluate_loss(net: &Network<f32>, data: &[Prepared], smooth: f64, batch_size: usize) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Err(TrainError::Config("cannot evaluate an empty set".into()));
    }
    let mut total = 0.0;
    for chunk in data.chunks(batch_size.max(1)) {
        let (images, targets) = batch_tensors(&chunk.iter().collect::<Vec<_>>(), None)?;
        let mut tape = Tape::new();
        let bound = net.store().bind(&mut tape, false);
        let x = tape.leaf(images);
        let t = tape.leaf(targets);
        let out = net.forward(&mut tape, &bound, x, Mode::Eval)?;
        let loss = dice_loss(&mut tape, out.logits, t, smooth as f32)?;
        total += tape.value(loss).data()[0] as f64 * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Trains `net` until `max_epochs` or early stopping, then loads the weights
/// of the epoch with the lowest validation loss back into it.
///
/// Passing the state of an interrupted run continues it; the result matches
/// an uninterrupted run bit for bit.
pub fn fit(
    net: &mut Network<f32>,
    train: &[Prepared],
    val: &[Prepared],
    cfg: &TrainConfig,
    resume: Option<TrainState>,
    observer: &mut dyn FnMut(EpochEvent) -> Result<(), TrainError>,
) -> Result<FitOutcome, TrainError> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::Config("training and validation sets must be non-empty".into()));
    }
    let mut state = resume.unwrap_or_else(|| TrainState::new(net.store()));
    if state.optimizer.m.len() != net.store().len() {
        return Err(TrainError::State("saved state does not match the network".into()));
    }
    let smooth = cfg.dice_smooth as f32;
    let mut epoch = state.epoch + 1;
    while !state.stopped_early && epoch <= cfg.max_epochs {
        let lr = lr_at(epoch, cfg);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut sample_rng(cfg.seed, epoch, usize::MAX));
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let items: Vec<&Prepared> = chunk.iter().map(|&i| &train[i]).collect();
            let augment = cfg.augment.then_some((cfg.seed, epoch, chunk));
            let (images, targets) = batch_tensors(&items, augment)?;
            let mut tape = Tape::new();
            let bound = net.store().bind(&mut tape, true);
            let x = tape.leaf(images);
            let t = tape.leaf(targets);
            let out = net.forward(&mut tape, &bound, x, Mode::Train)?;
            let loss = dice_loss(&mut tape, out.logits, t, smooth)?;
            let value = tape.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: b });
            }
            tape.backward(loss)?;
            let vars = bound.vars();
            state.optimizer.update(net.store_mut(), |i| tape.grad(vars[i]), lr)?;
            net.update_running_stats(&tape, &out);
            total += value * chunk.len() as f64;
        }
        let train_loss = total / train.len() as f64;
        let val_loss = evaluate_loss(net, val, cfg.dice_smooth, cfg.batch_size)?;
        let improved = val_loss < state.best_val_loss;
        if improved {
            state.best_val_loss = val_loss;
            state.best_epoch = epoch;
            state.epochs_since_improvement = 0;
            state.best = net.store().clone();
        } else {
            state.epochs_since_improvement += 1;
        }
        state.history.push(HistoryRow { epoch, lr, train_loss, val_loss });
        state.epoch = epoch;
        if state.epochs_since_improvement > cfg.early_stop_patience {
            state.stopped_early = true;
        }
        observer(EpochEvent { epoch, lr, train_loss, val_loss, improved, network: net, state: &state })?;
        epoch += 1;
    }
    let last = std::mem::replace(net.store_mut(), state.best.clone());
    Ok(FitOutcome {
        history: state.history.clone(),
        best_epoch: state.best_epoch,
        best_val_loss: state.best_val_loss,
        stopped_early: state.stopped_early,
        last,
        state,
    })
}
