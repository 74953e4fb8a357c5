//! Mini-batch Adam training with early stopping on validation nDCG@10.

use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Encoded;
use crate::error::{LsanError, Result};
use crate::eval::rank_cases;
use crate::metrics::ndcg_at;
use crate::model::{LsanModel, SeqInput};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Graph, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Weight of the squared L2 penalty in the loss.
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            adam: AdamConfig::default(),
            lambda: 1e-5,
            epochs: 200,
            seed: 42,
            patience: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let a = &self.adam;
        if self.batch_size == 0 || self.patience == 0 {
            return Err(LsanError::Config("batch size and patience must be positive".into()));
        }
        if !(a.lr > 0.0 && a.eps > 0.0 && self.lambda >= 0.0) {
            return Err(LsanError::Config("learning rate and eps must be positive, lambda non-negative".into()));
        }
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return Err(LsanError::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training loss over the epoch's samples.
    pub loss: f64,
    pub val_ndcg10: f64,
    pub seconds: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,loss,val_ndcg10,seconds";

    pub fn csv_row(&self) -> String {
        format!("{},{:.6},{:.6},{:.3}", self.epoch, self.loss, self.val_ndcg10, self.seconds)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochLog>,
    /// Epoch whose parameters were kept; 0 means the initialisation.
    pub best_epoch: usize,
    pub best_val_ndcg10: f64,
}

/// Mean validation nDCG@10.
pub fn validation_ndcg10<T: Scalar>(model: &LsanModel<T>, val: &[Encoded]) -> Result<f64> {
    if val.is_empty() {
        return Ok(0.0);
    }
    let ranks = rank_cases(model, val)?;
    Ok(ranks.iter().map(|&r| ndcg_at(r, 10)).sum::<f64>() / ranks.len() as f64)
}

/// One optimiser step on `batch`, returning the loss before the update.
pub fn train_step<T: Scalar>(
    model: &mut LsanModel<T>,
    adam: &mut Adam<T>,
    batch: &[&Encoded],
    lambda: f64,
) -> Result<f64> {
    let inputs: Vec<SeqInput<'_>> = batch.iter().map(|s| SeqInput::new(&s.items, &s.contexts)).collect();
    let targets: Vec<usize> = batch.iter().map(|s| s.target).collect();
    let mut g = Graph::new();
    let loss = model.training_loss(&mut g, &inputs, &targets, lambda)?;
    let value = g.value(loss).data()[0].as_f64();
    if !value.is_finite() {
        return Ok(value);
    }
    g.backward(loss)?;
    let grads: Vec<Option<&[T]>> = model.params().ids().map(|id| g.param_grad(id.index())).collect();
    adam.step(model.tensors_mut(), &grads)?;
    Ok(value)
}

/// Trains in place and leaves `model` holding the best-validation parameters.
/// `on_epoch` sees each epoch's log row as it completes.
pub fn train<T: Scalar>(
    model: &mut LsanModel<T>,
    samples: &[Encoded],
    val: &[Encoded],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(LsanError::contract("no training samples"));
    }
    let mut outcome = TrainOutcome {
        history: Vec::new(),
        best_epoch: 0,
        best_val_ndcg10: 0.0,
    };
    if cfg.epochs == 0 {
        return Ok(outcome);
    }
    let track_val = !val.is_empty();
    outcome.best_val_ndcg10 = validation_ndcg10(model, val)?;
    let mut best: Vec<Tensor<T>> = model.params().tensors().to_vec();
    let mut adam = Adam::new(cfg.adam, model.params().tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut stale = 0;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Encoded> = chunk.iter().map(|&i| &samples[i]).collect();
            let loss = train_step(model, &mut adam, &batch, cfg.lambda)?;
            if !loss.is_finite() {
                return Err(LsanError::NonFiniteLoss { epoch, batch: b, loss });
            }
            total += loss * chunk.len() as f64;
        }
        let val_ndcg10 = validation_ndcg10(model, val)?;
        let log = EpochLog {
            epoch,
            loss: total / samples.len() as f64,
            val_ndcg10,
            seconds: start.elapsed().as_secs_f64(),
        };
        info!("epoch {epoch}: loss {:.5}, val nDCG@10 {val_ndcg10:.5}", log.loss);
        on_epoch(&log);
        outcome.history.push(log);
        if !track_val || val_ndcg10 > outcome.best_val_ndcg10 {
            outcome.best_val_ndcg10 = val_ndcg10;
            outcome.best_epoch = epoch;
            best.clone_from_slice(model.params().tensors());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                info!("no validation improvement for {stale} epochs, stopping");
                break;
            }
        }
    }
    model.tensors_mut().clone_from_slice(&best);
    Ok(outcome)
}
