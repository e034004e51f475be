use mmvq_autodiff::{Adam, Tape, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{Batch, LossParts, MrlModel};
use super::quantize::QuantMode;
use super::{MrlCheckpoint, MrlConfig, SelectOn};
use crate::error::{Error, Result};
use crate::util::module_rng;

/// Aligned audio/video FVTC matrices of one segment.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentPair {
    pub audio: Tensor<f32>,
    pub video: Tensor<f32>,
}

#[derive(Clone, Debug, Default)]
pub struct MrlDataset {
    pub train: Vec<SegmentPair>,
    pub val: Vec<SegmentPair>,
    pub test: Vec<SegmentPair>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over the epoch's training batches, weighted by batch size.
    pub train: LossParts,
    pub val: Option<LossParts>,
    pub test: Option<LossParts>,
    /// Training-time codebook selections per entry.
    pub usage: Vec<u64>,
}

impl EpochRecord {
    pub fn distinct_codes(&self) -> usize {
        self.usage.iter().filter(|&&c| c > 0).count()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: MrlCheckpoint,
    pub history: Vec<EpochRecord>,
}

fn batches<'a>(xs: &'a [SegmentPair], order: &[usize], size: usize) -> impl Iterator<Item = Result<Batch<f32>>> + 'a {
    let order = order.to_vec();
    (0..order.len().div_ceil(size)).map(move |b| {
        let idx = &order[b * size..((b + 1) * size).min(order.len())];
        let a: Vec<&Tensor<f32>> = idx.iter().map(|&i| &xs[i].audio).collect();
        let v: Vec<&Tensor<f32>> = idx.iter().map(|&i| &xs[i].video).collect();
        Batch::stack(&a, &v)
    })
}

/// Mean losses over a split, without gradients.
pub fn evaluate(model: &MrlModel<f32>, xs: &[SegmentPair], batch_size: usize) -> Result<Option<LossParts>> {
    if xs.is_empty() {
        return Ok(None);
    }
    let order: Vec<usize> = (0..xs.len()).collect();
    let mut acc = LossParts::default();
    for b in batches(xs, &order, batch_size) {
        let b = b?;
        let mut tape = Tape::new();
        let v = model.loss(&mut tape, &b, QuantMode::Nearest)?;
        acc.scaled_add(&LossParts::read(&tape, &v), b.len() as f64 / xs.len() as f64);
    }
    Ok(Some(acc))
}

/// Trains the VQ-VAE with Adam and returns the checkpoint with the lowest
/// total loss on the selection split.
pub fn train_mrl(data: &MrlDataset, config: &MrlConfig, seed: u64) -> Result<TrainOutcome> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::validation("MRL training split is empty"));
    }
    let t = &config.training;
    let mut model = MrlModel::<f32>::new(config, &mut module_rng(seed, "mrl.init"))?;
    let mut shuffle = module_rng(seed, "mrl.shuffle");
    let mut adam = Adam::new(t.lr as f32);
    let k = config.codebook.entries;
    let select = match t.select_on {
        SelectOn::Val => &data.val,
        SelectOn::Test => &data.test,
    };
    let mut history = Vec::with_capacity(t.epochs);
    let mut best: Option<(f64, usize, mmvq_autodiff::ParamStore<f32>)> = None;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 1..=t.epochs {
        order.shuffle(&mut shuffle);
        let mut train = LossParts::default();
        let mut usage = vec![0u64; k];
        for (step, b) in batches(&data.train, &order, t.batch_size).enumerate() {
            let b = b?;
            let mut tape = Tape::new();
            let v = model.loss(&mut tape, &b, QuantMode::Nearest).map_err(|e| match e {
                Error::Numeric(m) => Error::numeric(format!("epoch {epoch} step {step}: {m}")),
                other => other,
            })?;
            let parts = LossParts::read(&tape, &v);
            if !parts.total.is_finite() {
                return Err(Error::numeric(format!(
                    "epoch {epoch} step {step}: total loss {} (mse_a {}, mse_v {}, codebook {}, commitment {})",
                    parts.total, parts.mse_audio, parts.mse_video, parts.codebook, parts.commitment
                )));
            }
            for &i in &v.indices {
                usage[i] += 1;
            }
            train.scaled_add(&parts, b.len() as f64 / data.train.len() as f64);
            model.store.zero_grad();
            tape.backward_into(v.total, &mut model.store)?;
            adam.step(&mut model.store)?;
        }
        model.store.zero_grad();
        let val = evaluate(&model, &data.val, t.batch_size)?;
        let test = evaluate(&model, &data.test, t.batch_size)?;
        let score = match t.select_on {
            SelectOn::Val => val,
            SelectOn::Test => test,
        }
        .map_or(train.total, |p| p.total);
        log::info!(
            "mrl epoch {epoch}: train {:.5} val {} codes {}",
            train.total,
            val.map_or("-".into(), |p| format!("{:.5}", p.total)),
            usage.iter().filter(|&&c| c > 0).count()
        );
        if best.as_ref().is_none_or(|(s, _, _)| score < *s) {
            best = Some((score, epoch, model.store.clone()));
        }
        history.push(EpochRecord {
            epoch,
            train,
            val,
            test,
            usage,
        });
    }
    let (selected_epoch, store) = match best {
        Some((_, e, s)) => (e, s),
        None => (0, model.store.clone()),
    };
    if select.is_empty() {
        log::warn!("selection split is empty; selected on training loss");
    }
    Ok(TrainOutcome {
        checkpoint: MrlCheckpoint::new(model.with_store(store), selected_epoch, history.clone()),
        history,
    })
}
