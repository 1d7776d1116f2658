//! Epoch loop, early stopping and resumable training state.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cdm::BceMode;
use crate::dataset::{ResponseDataset, ResponseLog, SplitSpec};
use crate::error::{Error, Result};
use crate::evaluation::Metrics;
use crate::numerics::{rng, AdamState, Tape, Tensor, Var};

use super::config::{RegularizerSchedule, RunConfig};
use super::model::{Model, Regularizers};

/// Dataset, split and semantic vectors of one run.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub dataset: ResponseDataset,
    pub split: SplitSpec,
    /// Projected semantic rows, students then exercises.
    pub semantic: Option<Tensor>,
}

impl TrainData {
    pub fn train_logs(&self) -> Vec<ResponseLog> {
        self.dataset.select(&self.split.train)
    }

    pub fn val_logs(&self) -> Vec<ResponseLog> {
        self.dataset.select(&self.split.val)
    }

    pub fn test_logs(&self) -> Vec<ResponseLog> {
        self.dataset.select(&self.split.test)
    }
}

/// One line of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean BCE over the epoch's batches. The regulariser terms are in the
    /// same units: divided by the carrying batch's size in mean mode.
    pub bce: f64,
    pub relation: f64,
    pub semantic: f64,
    pub uncond: f64,
    pub cond: f64,
    /// `bce + λ(relation + semantic + ρ·uncond + cond)`.
    pub total: f64,
    /// BCE of the batch carrying the regularisers.
    pub first_batch_bce: f64,
    /// Objective value of that batch as evaluated on the tape.
    pub first_batch_total: f64,
    pub batches: usize,
    pub val: Metrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BestState {
    pub epoch: usize,
    pub val_auc: f64,
    pub params: Vec<Tensor>,
}

/// Everything needed to continue training after `epoch` completed epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    pub adam: AdamState,
    pub best: Option<BestState>,
    pub bad_epochs: usize,
    pub history: Vec<EpochRecord>,
    pub stopped: bool,
}

impl TrainState {
    pub fn new(model: &Model) -> Self {
        TrainState {
            epoch: 0,
            adam: AdamState::new(model.config.train.adam(), &model.store),
            best: None,
            bad_epochs: 0,
            history: Vec::new(),
            stopped: false,
        }
    }
}

fn value(tape: &Tape, v: Option<Var>) -> Result<f64> {
    v.map_or(Ok(0.0), |v| tape.value(v).item())
}

/// Weight turning regulariser sums into the units of the BCE term: mean-mode
/// BCE divides the summed likelihood by the batch size, and the whole
/// objective is divided with it.
pub fn reg_scale(mode: BceMode, batch: usize) -> f64 {
    match mode {
        BceMode::Mean => 1.0 / batch as f64,
        BceMode::Sum => 1.0,
    }
}

fn per_sample(tape: &mut Tape, reg: Regularizers, scale: f64) -> Regularizers {
    let mut s = |v: Option<Var>| v.map(|v| tape.scale(v, scale));
    Regularizers {
        relation: s(reg.relation),
        semantic: s(reg.semantic),
        uncond: s(reg.uncond),
        cond: s(reg.cond),
    }
}

struct StepTerms {
    bce: f64,
    relation: f64,
    semantic: f64,
    uncond: f64,
    cond: f64,
    total: f64,
}

/// One epoch of updates over shuffled training batches. Returns the
/// record without validation metrics filled in.
pub fn epoch_step(
    model: &mut Model,
    state: &mut TrainState,
    train: &[ResponseLog],
) -> Result<(EpochRecord, usize)> {
    if train.is_empty() {
        return Err(Error::Data("no training logs".into()));
    }
    let cfg = model.config.clone();
    let epoch = state.epoch;
    let lambda = cfg.loss.lambda;
    let rho = cfg.loss.rho;
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng::stream(cfg.seed, "batches", epoch as u64));
    let batches: Vec<&[usize]> = order.chunks(cfg.train.batch_size).collect();

    let mut terms: Vec<StepTerms> = Vec::with_capacity(batches.len());
    for (bi, chunk) in batches.iter().enumerate() {
        let logs: Vec<ResponseLog> = chunk.iter().map(|&i| train[i]).collect();
        let mut tape = Tape::new();
        let b = model.store.bind(&mut tape);
        let fwd = model.forward(&mut tape, &b)?;
        let bce = model.bce(&mut tape, &b, &fwd, &logs)?;
        let with_reg =
            lambda > 0.0 && (bi == 0 || cfg.train.regularizers == RegularizerSchedule::PerBatch);
        let reg = if with_reg {
            let stream = (epoch as u64) << 20 | bi as u64;
            let raw = model.regularizers(&mut tape, &b, &fwd, stream)?;
            per_sample(&mut tape, raw, reg_scale(cfg.train.bce, logs.len()))
        } else {
            Regularizers::default()
        };
        let mut extra: Option<Var> = None;
        for (v, w) in [
            (reg.relation, 1.0),
            (reg.semantic, 1.0),
            (reg.uncond, rho),
            (reg.cond, 1.0),
        ] {
            if let Some(v) = v {
                let s = tape.scale(v, w);
                extra = Some(match extra {
                    Some(e) => tape.add(e, s)?,
                    None => s,
                });
            }
        }
        let total = match extra {
            Some(e) => {
                let e = tape.scale(e, lambda);
                tape.add(bce, e)?
            }
            None => bce,
        };
        let t = StepTerms {
            bce: tape.value(bce).item()?,
            relation: value(&tape, reg.relation)?,
            semantic: value(&tape, reg.semantic)?,
            uncond: value(&tape, reg.uncond)?,
            cond: value(&tape, reg.cond)?,
            total: tape.value(total).item()?,
        };
        if ![t.bce, t.relation, t.semantic, t.uncond, t.cond, t.total]
            .iter()
            .all(|x| x.is_finite())
        {
            return Err(Error::Numeric(format!(
                "non-finite loss at epoch {epoch}, batch {bi}: bce={} relation={} semantic={} uncond={} cond={} total={}",
                t.bce, t.relation, t.semantic, t.uncond, t.cond, t.total
            )));
        }
        let grads = tape.backward(total)?;
        let g = b.collect(&tape, &grads);
        drop(tape);
        let scales = model.ids.head.lr_scales(&model.store);
        state.adam.step_scaled(&mut model.store, &g, &scales)?;
        model.ids.head.project(&mut model.store);
        terms.push(t);
    }

    let nb = terms.len() as f64;
    let reg_batches: Vec<&StepTerms> = match cfg.train.regularizers {
        RegularizerSchedule::PerEpoch => terms.iter().take(1).collect(),
        RegularizerSchedule::PerBatch => terms.iter().collect(),
    };
    let mean = |f: fn(&StepTerms) -> f64| {
        reg_batches.iter().map(|t| f(t)).sum::<f64>() / reg_batches.len() as f64
    };
    let (relation, semantic, uncond, cond) = (
        mean(|t| t.relation),
        mean(|t| t.semantic),
        mean(|t| t.uncond),
        mean(|t| t.cond),
    );
    let bce = terms.iter().map(|t| t.bce).sum::<f64>() / nb;
    let record = EpochRecord {
        epoch,
        bce,
        relation,
        semantic,
        uncond,
        cond,
        total: bce + lambda * (relation + semantic + rho * uncond + cond),
        first_batch_bce: terms[0].bce,
        first_batch_total: terms[0].total,
        batches: terms.len(),
        val: Metrics {
            acc: f64::NAN,
            auc: f64::NAN,
            f1: f64::NAN,
            doa: None,
        },
    };
    state.epoch += 1;
    Ok((record, terms.len()))
}

/// Accuracy, AUC and F1 of `model` on `logs`.
pub fn evaluate_logs(model: &Model, logs: &[ResponseLog]) -> Result<Metrics> {
    let scores = model.predict(logs)?;
    let labels: Vec<bool> = logs.iter().map(|l| l.correct).collect();
    Metrics::compute(&scores, &labels, None)
}

/// Called after every epoch with the updated state.
pub type EpochHook<'a> = dyn FnMut(&Model, &TrainState) -> Result<()> + 'a;

/// Continue training until early stopping or the epoch cap.
pub fn train_from(
    model: &mut Model,
    state: &mut TrainState,
    data: &TrainData,
    hook: &mut EpochHook<'_>,
) -> Result<()> {
    let train = data.train_logs();
    let val = data.val_logs();
    if val.is_empty() {
        return Err(Error::Data("validation split is empty".into()));
    }
    let cfg = model.config.clone();
    while !state.stopped && state.epoch < cfg.train.max_epochs {
        let (mut record, _) = epoch_step(model, state, &train)?;
        record.val = evaluate_logs(model, &val)?;
        let auc = record.val.auc;
        let improved = state.best.as_ref().is_none_or(|b| auc > b.val_auc);
        if improved {
            state.best = Some(BestState {
                epoch: record.epoch,
                val_auc: auc,
                params: model.store.values().to_vec(),
            });
            state.bad_epochs = 0;
        } else {
            state.bad_epochs += 1;
        }
        log::info!(
            "epoch {:>3} bce {:.5} rel {:.4} sem {:.4} unc {:.4} cond {:.4} total {:.5} val auc {:.4}{}",
            record.epoch,
            record.bce,
            record.relation,
            record.semantic,
            record.uncond,
            record.cond,
            record.total,
            auc,
            if improved { " *" } else { "" }
        );
        state.history.push(record);
        if state.bad_epochs >= cfg.train.patience {
            state.stopped = true;
        }
        hook(model, state)?;
    }
    state.stopped = true;
    Ok(())
}

/// Trained model with the best validation parameters loaded, and the final state.
pub struct TrainOutcome {
    pub model: Model,
    pub state: TrainState,
}

impl TrainOutcome {
    pub fn best_epoch(&self) -> usize {
        self.state.best.as_ref().map_or(0, |b| b.epoch)
    }

    pub fn best_val_auc(&self) -> f64 {
        self.state.best.as_ref().map_or(f64::NAN, |b| b.val_auc)
    }
}

pub fn train(config: &RunConfig, data: &TrainData) -> Result<TrainOutcome> {
    train_with_hook(config, data, &mut |_, _| Ok(()))
}

pub fn train_with_hook(
    config: &RunConfig,
    data: &TrainData,
    hook: &mut EpochHook<'_>,
) -> Result<TrainOutcome> {
    if !data.split.is_partition_of(data.dataset.logs.len()) {
        return Err(Error::Data(
            "split does not partition the dataset's logs".into(),
        ));
    }
    let mut model = Model::build(
        config,
        &data.dataset,
        &data.split.train,
        data.semantic.clone(),
    )?;
    let mut state = TrainState::new(&model);
    train_from(&mut model, &mut state, data, hook)?;
    load_best(&mut model, &state)?;
    Ok(TrainOutcome { model, state })
}

pub fn load_best(model: &mut Model, state: &TrainState) -> Result<()> {
    if let Some(best) = &state.best {
        model.store.load_values(best.params.clone())?;
    }
    Ok(())
}
