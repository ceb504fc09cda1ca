use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Schedule;
use crate::error::{Error, Result};
use crate::numcore::{adam_step, ParameterStore, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_auroc: Option<f64>,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_valid_auroc: Option<f64>,
    pub trainable_params: usize,
}

/// Mini-batch Adam over `n_train` examples with per-epoch validation.
///
/// Keeps the parameters of the epoch with the highest validation score and
/// restores them at the end. `loss` builds the loss of one example on a
/// fresh tape; gradients are averaged over the batch.
pub(crate) fn run<M>(
    model: &mut M,
    store_of: fn(&mut M) -> &mut ParameterStore,
    n_train: usize,
    schedule: &Schedule,
    loss: impl Fn(&M, usize, &mut Tape, &mut ChaCha8Rng) -> Result<Var>,
    validate: impl Fn(&M) -> Option<f64>,
) -> Result<TrainReport> {
    schedule.validate()?;
    if n_train == 0 {
        return Err(Error::config("train", "training set is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut records = Vec::new();
    let mut best: Option<(f64, usize, ParameterStore)> = None;
    let mut since_best = 0usize;
    let mut step = 0usize;
    let trainable_params = store_of(model).trainable_count();
    store_of(model).zero_grad();

    'epochs: for epoch in 1..=schedule.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(schedule.batch_size) {
            if schedule.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let mut tape = Tape::new();
                let l = loss(model, i, &mut tape, &mut rng)?;
                let value = tape.value(l).item();
                if !value.is_finite() {
                    return Err(Error::Divergence { step, loss: value });
                }
                total += value;
                seen += 1;
                tape.backward(l)?;
                tape.accumulate_into(store_of(model), scale);
            }
            let store = store_of(model);
            if let Some(c) = schedule.clip_grad_norm {
                store.clip_grad_norm(c);
            }
            adam_step(store, &schedule.adam)?;
            store.zero_grad();
            step += 1;
        }
        let valid_auroc = validate(model);
        records.push(EpochRecord {
            epoch,
            train_loss: if seen > 0 { total / seen as f64 } else { f64::NAN },
            valid_auroc,
            steps: step,
        });
        let score = valid_auroc.unwrap_or(f64::NEG_INFINITY);
        match &best {
            Some((b, _, _)) if score <= *b => since_best += 1,
            _ => {
                best = Some((score, epoch, store_of(model).clone()));
                since_best = 0;
            }
        }
        if schedule.patience.is_some_and(|p| since_best >= p) {
            break;
        }
        // A perfect validation score cannot improve.
        if score >= 1.0 && schedule.patience.is_some() {
            break;
        }
    }

    let (best_epoch, best_valid_auroc) = match best {
        Some((score, epoch, snapshot)) => {
            *store_of(model) = snapshot;
            (epoch, score.is_finite().then_some(score))
        }
        None => (records.len(), None),
    };
    Ok(TrainReport {
        epochs: records,
        best_epoch,
        best_valid_auroc,
        trainable_params,
    })
}
