//! Session-level multi-task model: stacked segment embeddings → temporal
//! convolution → masked mean → shared trunk → class logits and a
//! standardized severity score, trained under homoscedastic uncertainty
//! weighting.

use std::path::Path;

use mmvq_autodiff::{
    softmax_row, Adam, Container, ConvSpec, EntryData, ParamId, ParamStore, Scalar, Tape, Tensor, Var,
};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{SymptomClass, BPRS_MAX_TOTAL, BPRS_MIN_TOTAL};
use crate::error::{Error, Result};
use crate::util::{content_hash, module_rng};

/// Zero-padded stack of one session's segment embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionMatrix {
    /// `[t_max, L]`
    pub values: Tensor<f32>,
    /// `[t_max]`, 1 for real segments.
    pub mask: Vec<f32>,
    pub session_id: String,
    pub subject_id: String,
}

impl SessionMatrix {
    pub fn t_max(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m > 0.0).count()
    }
}

/// Stacks embeddings in segment order and zero-pads to `t_max` rows.
pub fn stack_session(
    embeddings: &[Vec<f32>],
    t_max: usize,
    session_id: &str,
    subject_id: &str,
) -> Result<SessionMatrix> {
    let count = embeddings.len();
    if count == 0 {
        return Err(Error::validation(format!("session {session_id} has no segments")));
    }
    if count > t_max {
        return Err(Error::validation(format!(
            "session {session_id} has {count} segments but t_max is {t_max}; \
             re-derive t_max from the longest session in the corpus"
        )));
    }
    let l = embeddings[0].len();
    let mut values = vec![0.0f32; t_max * l];
    for (t, e) in embeddings.iter().enumerate() {
        if e.len() != l {
            return Err(Error::validation(format!(
                "session {session_id}: embedding {t} has size {}, expected {l}",
                e.len()
            )));
        }
        values[t * l..(t + 1) * l].copy_from_slice(e);
    }
    let mask = (0..t_max).map(|t| if t < count { 1.0 } else { 0.0 }).collect();
    Ok(SessionMatrix {
        values: Tensor::new(&[t_max, l], values)?,
        mask,
        session_id: session_id.to_string(),
        subject_id: subject_id.to_string(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    Mtl,
    Cls,
    Reg,
}

impl TaskMode {
    pub const ALL: [TaskMode; 3] = [TaskMode::Mtl, TaskMode::Cls, TaskMode::Reg];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskMode::Mtl => "mtl",
            TaskMode::Cls => "cls",
            TaskMode::Reg => "reg",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlateauConfig {
    pub factor: f64,
    /// Minimum absolute improvement that resets patience.
    pub threshold: f64,
    pub patience: usize,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            factor: 0.5,
            threshold: 0.001,
            patience: 150,
        }
    }
}

/// Reduce-on-plateau learning-rate schedule over validation loss.
#[derive(Clone, Debug, PartialEq)]
pub struct ReduceOnPlateau {
    pub lr: f64,
    cfg: PlateauConfig,
    best: f64,
    bad_epochs: usize,
}

impl ReduceOnPlateau {
    pub fn new(lr: f64, cfg: PlateauConfig) -> Self {
        Self {
            lr,
            cfg,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Records one epoch's validation loss; returns true when the learning
    /// rate was reduced. A reduction happens once `patience` consecutive
    /// epochs fail to beat the best loss by more than `threshold`.
    pub fn step(&mut self, val_loss: f64) -> bool {
        if val_loss < self.best - self.cfg.threshold {
            self.best = val_loss;
            self.bad_epochs = 0;
            return false;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.cfg.patience {
            self.lr *= self.cfg.factor;
            self.bad_epochs = 0;
            return true;
        }
        false
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Parameters from the epoch with the lowest validation loss.
    BestVal,
    /// Parameters after the last epoch.
    Final,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DownstreamConfig {
    /// Session length in segments; derived from the corpus when absent.
    pub t_max: Option<usize>,
    pub conv_channels: usize,
    pub conv_kernel: usize,
    pub trunk_dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub plateau: PlateauConfig,
    pub selection: Selection,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        Self {
            t_max: None,
            conv_channels: 128,
            conv_kernel: 5,
            trunk_dim: 128,
            epochs: 1000,
            lr: 1e-5,
            batch_size: 32,
            plateau: PlateauConfig::default(),
            selection: Selection::BestVal,
        }
    }
}

impl DownstreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_channels == 0 || self.trunk_dim == 0 || self.batch_size == 0 {
            return Err(Error::validation("downstream sizes must be positive"));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(Error::validation("temporal kernel must be odd"));
        }
        if self.lr < 0.0 || !(self.plateau.factor > 0.0 && self.plateau.factor <= 1.0) {
            return Err(Error::validation("need lr ≥ 0 and plateau factor in (0, 1]"));
        }
        if self.t_max == Some(0) {
            return Err(Error::validation("t_max must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Ids {
    conv_w: ParamId,
    conv_b: ParamId,
    trunk_w: ParamId,
    trunk_b: ParamId,
    cls_w: ParamId,
    cls_b: ParamId,
    reg_w: ParamId,
    reg_b: ParamId,
    log_sigma1: ParamId,
    log_sigma2: ParamId,
}

/// Tape outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Heads {
    /// `[N, 3]`
    pub logits: Var,
    /// `[N, 1]`
    pub score: Var,
    pub log_sigma1: Var,
    pub log_sigma2: Var,
}

/// `L_cls/(2σ1²) + ln σ1 + L_reg/(2σ2²) + ln σ2` with `σi = exp(log_sigma_i)`.
pub fn mtl_loss_value(l_cls: f64, l_reg: f64, log_sigma1: f64, log_sigma2: f64) -> f64 {
    0.5 * l_cls * (-2.0 * log_sigma1).exp() + log_sigma1 + 0.5 * l_reg * (-2.0 * log_sigma2).exp() + log_sigma2
}

/// Tape version of [`mtl_loss_value`]; all inputs are scalars.
pub fn mtl_loss<T: Scalar>(
    tape: &mut Tape<T>,
    l_cls: Var,
    l_reg: Var,
    log_sigma1: Var,
    log_sigma2: Var,
) -> Result<Var> {
    let half = T::from_f64_lossy(0.5);
    let term = |tape: &mut Tape<T>, l: Var, s: Var| -> Result<Var> {
        let m2 = tape.scale(s, T::from_f64_lossy(-2.0));
        let w = tape.exp(m2);
        let lw = tape.mul(l, w)?;
        let lw = tape.scale(lw, half);
        Ok(tape.add(lw, s)?)
    };
    let a = term(tape, l_cls, log_sigma1)?;
    let b = term(tape, l_reg, log_sigma2)?;
    Ok(tape.add(a, b)?)
}

#[derive(Clone, Debug)]
pub struct MtlModel<T> {
    pub store: ParamStore<T>,
    pub embed_dim: usize,
    pub t_max: usize,
    pub config: DownstreamConfig,
    ids: Ids,
}

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(-bound..=bound)))
}

impl<T: Scalar> MtlModel<T> {
    pub fn new(config: &DownstreamConfig, embed_dim: usize, t_max: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let (c, k, h) = (config.conv_channels, config.conv_kernel, config.trunk_dim);
        let mut s = ParamStore::new();
        let conv_fan = (embed_dim * k) as f64;
        let ids = Ids {
            conv_w: s.add(
                "temporal.w",
                uniform(rng, &[c, embed_dim, 1, k], (6.0 / conv_fan).sqrt()),
            ),
            conv_b: s.add("temporal.b", Tensor::zeros(&[c])),
            trunk_w: s.add("trunk.w", uniform(rng, &[c, h], (6.0 / c as f64).sqrt())),
            trunk_b: s.add("trunk.b", Tensor::zeros(&[h])),
            cls_w: s.add("cls.w", uniform(rng, &[h, 3], (3.0 / h as f64).sqrt())),
            cls_b: s.add("cls.b", Tensor::zeros(&[3])),
            reg_w: s.add("reg.w", uniform(rng, &[h, 1], (3.0 / h as f64).sqrt())),
            reg_b: s.add("reg.b", Tensor::zeros(&[1])),
            log_sigma1: s.add("log_sigma1", Tensor::scalar(T::zero())),
            log_sigma2: s.add("log_sigma2", Tensor::scalar(T::zero())),
        };
        Ok(Self {
            store: s,
            embed_dim,
            t_max,
            config: config.clone(),
            ids,
        })
    }

    pub fn cast<U: Scalar>(&self) -> MtlModel<U> {
        MtlModel {
            store: self.store.cast(),
            embed_dim: self.embed_dim,
            t_max: self.t_max,
            config: self.config.clone(),
            ids: self.ids,
        }
    }

    pub fn param_ids(&self) -> Vec<(String, ParamId)> {
        self.store.iter().map(|(id, p)| (p.name.clone(), id)).collect()
    }

    pub fn log_sigma_ids(&self) -> (ParamId, ParamId) {
        (self.ids.log_sigma1, self.ids.log_sigma2)
    }

    /// Batch inputs: masked values transposed to `[N, L, 1, T]` and mask `[N, T]`.
    pub fn inputs(&self, sessions: &[&SessionMatrix]) -> Result<(Tensor<T>, Tensor<T>)> {
        let (t_max, l) = (self.t_max, self.embed_dim);
        let n = sessions.len();
        let mut x = vec![T::zero(); n * l * t_max];
        let mut mask = vec![T::zero(); n * t_max];
        for (b, s) in sessions.iter().enumerate() {
            if s.t_max() != t_max || s.dim() != l {
                return Err(Error::validation(format!(
                    "session {} matrix is {}x{}, model expects {t_max}x{l}",
                    s.session_id,
                    s.t_max(),
                    s.dim()
                )));
            }
            if s.count() == 0 {
                return Err(Error::validation(format!(
                    "session {} has an all-zero mask",
                    s.session_id
                )));
            }
            if !s.values.all_finite() {
                return Err(Error::numeric(format!(
                    "session {} has non-finite embedding values",
                    s.session_id
                )));
            }
            for t in 0..t_max {
                let m = s.mask[t];
                mask[b * t_max + t] = T::from_f32(m).unwrap();
                if m > 0.0 {
                    for j in 0..l {
                        x[(b * l + j) * t_max + t] = T::from_f32(s.values.data()[t * l + j] * m).unwrap();
                    }
                }
            }
        }
        Ok((Tensor::new(&[n, l, 1, t_max], x)?, Tensor::new(&[n, t_max], mask)?))
    }

    /// Forward pass. Every parameter is recorded so that unused heads
    /// receive explicit zero gradients.
    pub fn forward(&self, tape: &mut Tape<T>, x: &Tensor<T>, mask: &Tensor<T>) -> Result<Heads> {
        let p = |tape: &mut Tape<T>, id| tape.param(&self.store, id);
        let n = x.shape()[0];
        let c = self.config.conv_channels;
        let xv = tape.constant(x.clone());
        let (w, b) = (p(tape, self.ids.conv_w), p(tape, self.ids.conv_b));
        let pad = self.config.conv_kernel / 2;
        let h = tape.conv2d_with(xv, w, ConvSpec::new(1, 0).with_padding(0, pad))?;
        let h = tape.channel_bias(h, b)?;
        let h = tape.relu(h);
        let h = tape.reshape(h, &[n, c, self.t_max])?;
        let pooled = tape.masked_mean(h, mask)?;
        let (w, b) = (p(tape, self.ids.trunk_w), p(tape, self.ids.trunk_b));
        let h = tape.linear(pooled, w, Some(b))?;
        let h = tape.relu(h);
        let (w, b) = (p(tape, self.ids.cls_w), p(tape, self.ids.cls_b));
        let logits = tape.linear(h, w, Some(b))?;
        let (w, b) = (p(tape, self.ids.reg_w), p(tape, self.ids.reg_b));
        let score = tape.linear(h, w, Some(b))?;
        Ok(Heads {
            logits,
            score,
            log_sigma1: p(tape, self.ids.log_sigma1),
            log_sigma2: p(tape, self.ids.log_sigma2),
        })
    }

    /// Loss for the chosen mode: mtl uses the uncertainty-weighted sum,
    /// cls plain cross-entropy, reg plain mean squared error.
    pub fn loss(
        &self,
        tape: &mut Tape<T>,
        x: &Tensor<T>,
        mask: &Tensor<T>,
        classes: &[usize],
        target_z: &[T],
        mode: TaskMode,
    ) -> Result<(Var, Heads)> {
        let heads = self.forward(tape, x, mask)?;
        let l_cls = tape.softmax_cross_entropy(heads.logits, classes)?;
        let tgt = tape.constant(Tensor::new(&[target_z.len(), 1], target_z.to_vec())?);
        let l_reg = tape.mse(heads.score, tgt)?;
        let loss = match mode {
            TaskMode::Mtl => mtl_loss(tape, l_cls, l_reg, heads.log_sigma1, heads.log_sigma2)?,
            TaskMode::Cls => l_cls,
            TaskMode::Reg => l_reg,
        };
        Ok((loss, heads))
    }
}

/// Labelled session for training and evaluation.
#[derive(Clone, Debug)]
pub struct LabelledSession {
    pub matrix: SessionMatrix,
    pub class: SymptomClass,
    pub bprs_total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DownstreamEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub sigma1: f64,
    pub sigma2: f64,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: DownstreamConfig,
    config_hash: String,
    mode: TaskMode,
    mrl_hash: String,
    embed_dim: usize,
    t_max: usize,
    target_mean: f64,
    target_std: f64,
    selected_epoch: usize,
    history: Vec<DownstreamEpoch>,
}

#[derive(Clone, Debug)]
pub struct DownstreamCheckpoint {
    pub model: MtlModel<f32>,
    pub mode: TaskMode,
    pub config_hash: String,
    /// Hash of the representation model that produced the embeddings.
    pub mrl_hash: String,
    pub target_mean: f64,
    pub target_std: f64,
    pub selected_epoch: usize,
    pub history: Vec<DownstreamEpoch>,
}

/// Class probabilities and de-standardized severity for one session.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionPrediction {
    pub probs: [f64; 3],
    pub bprs_pred: f64,
}

impl SessionPrediction {
    pub fn class(&self) -> SymptomClass {
        let mut best = 0;
        for k in 1..3 {
            if self.probs[k] > self.probs[best] {
                best = k;
            }
        }
        SymptomClass::ALL[best]
    }
}

pub fn standardize(y: f64, mean: f64, std: f64) -> f64 {
    (y - mean) / std
}

pub fn destandardize(z: f64, mean: f64, std: f64) -> f64 {
    z * std + mean
}

impl DownstreamCheckpoint {
    pub fn hash_of(config: &DownstreamConfig, mode: TaskMode, mrl_hash: &str) -> String {
        content_hash(&(config, mode, mrl_hash))
    }

    fn meta(&self) -> Meta {
        Meta {
            config: self.model.config.clone(),
            config_hash: self.config_hash.clone(),
            mode: self.mode,
            mrl_hash: self.mrl_hash.clone(),
            embed_dim: self.model.embed_dim,
            t_max: self.model.t_max,
            target_mean: self.target_mean,
            target_std: self.target_std,
            selected_epoch: self.selected_epoch,
            history: self.history.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::new();
        c.insert("meta", EntryData::Bytes(serde_json::to_vec(&self.meta())?));
        c.insert_params("param/", &self.model.store);
        crate::util::write_atomic(path, &c.to_bytes()?)
    }

    pub fn load(path: &Path, expected_hash: Option<&str>) -> Result<Self> {
        let c = Container::read(path)?;
        let meta: Meta = serde_json::from_slice(c.bytes("meta")?)?;
        let recomputed = Self::hash_of(&meta.config, meta.mode, &meta.mrl_hash);
        if recomputed != meta.config_hash {
            return Err(Error::HashMismatch {
                expected: recomputed,
                found: meta.config_hash,
            });
        }
        if let Some(want) = expected_hash {
            if want != meta.config_hash {
                return Err(Error::HashMismatch {
                    expected: want.into(),
                    found: meta.config_hash,
                });
            }
        }
        let mut model = MtlModel::new(
            &meta.config,
            meta.embed_dim,
            meta.t_max,
            &mut module_rng(0, "downstream.load"),
        )?;
        c.load_params("param/", &mut model.store)?;
        Ok(Self {
            model,
            mode: meta.mode,
            config_hash: meta.config_hash,
            mrl_hash: meta.mrl_hash,
            target_mean: meta.target_mean,
            target_std: meta.target_std,
            selected_epoch: meta.selected_epoch,
            history: meta.history,
        })
    }

    /// Softmax probabilities and severity clipped to the BPRS range.
    pub fn predict(&self, sessions: &[&SessionMatrix]) -> Result<Vec<SessionPrediction>> {
        let (x, mask) = self.model.inputs(sessions)?;
        let mut tape = Tape::new();
        let heads = self.model.forward(&mut tape, &x, &mask)?;
        let logits = tape.value(heads.logits);
        let score = tape.value(heads.score);
        if !logits.all_finite() || !score.all_finite() {
            return Err(Error::numeric("non-finite downstream output"));
        }
        Ok(logits
            .data()
            .chunks(3)
            .zip(score.data())
            .map(|(row, &z)| {
                let row: Vec<f64> = row.iter().map(|&v| v as f64).collect();
                let (p, _) = softmax_row(&row);
                SessionPrediction {
                    probs: [p[0], p[1], p[2]],
                    bprs_pred: destandardize(z as f64, self.target_mean, self.target_std)
                        .clamp(BPRS_MIN_TOTAL as f64, BPRS_MAX_TOTAL as f64),
                }
            })
            .collect())
    }

    pub fn predict_session(&self, m: &SessionMatrix) -> Result<SessionPrediction> {
        Ok(self.predict(&[m])?.remove(0))
    }
}

struct Prepared {
    x: Tensor<f32>,
    mask: Tensor<f32>,
    classes: Vec<usize>,
    target_z: Vec<f32>,
}

fn prepare(model: &MtlModel<f32>, s: &[&LabelledSession], mean: f64, std: f64) -> Result<Prepared> {
    let mats: Vec<&SessionMatrix> = s.iter().map(|l| &l.matrix).collect();
    let (x, mask) = model.inputs(&mats)?;
    Ok(Prepared {
        x,
        mask,
        classes: s.iter().map(|l| l.class.index()).collect(),
        target_z: s.iter().map(|l| standardize(l.bprs_total, mean, std) as f32).collect(),
    })
}

fn eval_loss(model: &MtlModel<f32>, p: &Prepared, mode: TaskMode) -> Result<f64> {
    let mut tape = Tape::new();
    let (loss, _) = model.loss(&mut tape, &p.x, &p.mask, &p.classes, &p.target_z, mode)?;
    Ok(tape.value(loss).item() as f64)
}

/// Trains one downstream model. The regression target is standardized with
/// the training split's mean and population standard deviation.
pub fn train_downstream(
    train: &[LabelledSession],
    val: &[LabelledSession],
    config: &DownstreamConfig,
    mode: TaskMode,
    mrl_hash: &str,
    seed: u64,
) -> Result<DownstreamCheckpoint> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::validation(
            "downstream training needs non-empty train and val splits",
        ));
    }
    let first = &train[0].matrix;
    let (t_max, dim) = (first.t_max(), first.dim());
    let ys: Vec<f64> = train.iter().map(|s| s.bprs_total).collect();
    let mean = crate::util::mean(&ys);
    let sd = crate::util::std_dev(&ys);
    let std = if sd > 1e-9 { sd } else { 1.0 };
    let mut model = MtlModel::<f32>::new(
        config,
        dim,
        t_max,
        &mut module_rng(seed, &format!("downstream.init.{}", mode.as_str())),
    )?;
    let mut rng = module_rng(seed, &format!("downstream.shuffle.{}", mode.as_str()));
    let val_refs: Vec<&LabelledSession> = val.iter().collect();
    let val_p = prepare(&model, &val_refs, mean, std)?;
    let mut sched = ReduceOnPlateau::new(config.lr, config.plateau.clone());
    let mut adam = Adam::new(config.lr as f32);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut train_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&LabelledSession> = chunk.iter().map(|&i| &train[i]).collect();
            let p = prepare(&model, &batch, mean, std)?;
            let mut tape = Tape::new();
            let (loss, _) = model.loss(&mut tape, &p.x, &p.mask, &p.classes, &p.target_z, mode)?;
            let lv = tape.value(loss).item() as f64;
            if !lv.is_finite() {
                return Err(Error::numeric(format!(
                    "downstream {} epoch {epoch}: loss {lv} (lr {})",
                    mode.as_str(),
                    sched.lr
                )));
            }
            train_loss += lv * chunk.len() as f64 / train.len() as f64;
            model.store.zero_grad();
            tape.backward_into(loss, &mut model.store)?;
            if let Some((_, p)) = model
                .store
                .iter()
                .find(|(_, p)| p.grad.as_ref().is_some_and(|g| !g.all_finite()))
            {
                return Err(Error::numeric(format!(
                    "downstream {} epoch {epoch}: non-finite gradient for {}",
                    mode.as_str(),
                    p.name
                )));
            }
            adam.lr = sched.lr as f32;
            adam.step(&mut model.store)?;
        }
        model.store.zero_grad();
        let val_loss = eval_loss(&model, &val_p, mode)?;
        if !val_loss.is_finite() {
            return Err(Error::numeric(format!(
                "downstream epoch {epoch}: validation loss {val_loss}"
            )));
        }
        let (ls1, ls2) = model.log_sigma_ids();
        history.push(DownstreamEpoch {
            epoch,
            train_loss,
            val_loss,
            lr: sched.lr,
            sigma1: (model.store.value(ls1).item() as f64).exp(),
            sigma2: (model.store.value(ls2).item() as f64).exp(),
        });
        if sched.step(val_loss) {
            log::info!("downstream {} epoch {epoch}: lr reduced to {}", mode.as_str(), sched.lr);
        }
        if config.selection == Selection::BestVal && best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, model.store.clone()));
        }
    }
    let (selected_epoch, store) = match best {
        Some((_, e, s)) => (e, s),
        None => (config.epochs, model.store.clone()),
    };
    model.store = store;
    Ok(DownstreamCheckpoint {
        model,
        mode,
        config_hash: DownstreamCheckpoint::hash_of(config, mode, mrl_hash),
        mrl_hash: mrl_hash.to_string(),
        target_mean: mean,
        target_std: std,
        selected_epoch,
        history,
    })
}

/// One line of the predictions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub subject_id: String,
    pub session_id: String,
    pub true_class: SymptomClass,
    pub pred_class: SymptomClass,
    pub p_hc: f64,
    pub p_psz: f64,
    pub p_msz: f64,
    pub true_bprs: f64,
    pub pred_bprs: f64,
}

impl PredictionRow {
    pub fn probs(&self) -> [f64; 3] {
        [self.p_hc, self.p_psz, self.p_msz]
    }
}

pub fn predictions_to_csv(rows: &[PredictionRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::validation(format!("csv flush: {e}")))
}

pub fn write_predictions(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    crate::util::write_atomic(path, &predictions_to_csv(rows)?)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::validation(format!("{}: {other:?}", path.display())),
    })?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let want = [
        "subject_id",
        "session_id",
        "true_class",
        "pred_class",
        "p_hc",
        "p_psz",
        "p_msz",
        "true_bprs",
        "pred_bprs",
    ];
    if header != want {
        return Err(Error::validation(format!(
            "{}: header {header:?} does not match {want:?}",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec.map_err(|e| Error::validation(format!("{}: {e}", path.display())))?);
    }
    Ok(rows)
}

/// Predicts a labelled split and formats the rows.
pub fn prediction_rows(ckpt: &DownstreamCheckpoint, sessions: &[LabelledSession]) -> Result<Vec<PredictionRow>> {
    let mats: Vec<&SessionMatrix> = sessions.iter().map(|s| &s.matrix).collect();
    let preds = ckpt.predict(&mats)?;
    Ok(sessions
        .iter()
        .zip(preds)
        .map(|(s, p)| PredictionRow {
            subject_id: s.matrix.subject_id.clone(),
            session_id: s.matrix.session_id.clone(),
            true_class: s.class,
            pred_class: p.class(),
            p_hc: p.probs[0],
            p_psz: p.probs[1],
            p_msz: p.probs[2],
            true_bprs: s.bprs_total,
            pred_bprs: p.bprs_pred,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stack_examples() {
        let e = vec![vec![1.0f32, 2.0]; 3];
        let m = stack_session(&e, 5, "s", "p").unwrap();
        assert_eq!(m.mask, vec![1.0, 1.0, 1.0, 0.0, 0.0]);
        assert!(m.values.data()[6..].iter().all(|&v| v == 0.0));
        assert_eq!(stack_session(&e, 3, "s", "p").unwrap().mask, vec![1.0; 3]);
        let err = stack_session(&e, 2, "s", "p").unwrap_err().to_string();
        assert!(err.contains("t_max"));
    }

    #[test]
    fn mtl_loss_worked_value() {
        let v = mtl_loss_value(2.0, 8.0, 0.0, 2f64.ln());
        assert!((v - 2.6931).abs() < 1e-4, "{v}");
        assert!((mtl_loss_value(3.0, 5.0, 0.0, 0.0) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn plateau_reduces_once_at_151() {
        let mut s = ReduceOnPlateau::new(1.0, PlateauConfig::default());
        let reductions: Vec<usize> = (1..=151).filter(|_| s.step(0.7)).collect();
        assert_eq!(reductions, vec![151]);
        assert_eq!(s.lr, 0.5);
        // an improvement smaller than the threshold still counts as a bad epoch
        let mut s = ReduceOnPlateau::new(1.0, PlateauConfig::default());
        assert!(!s.step(1.0));
        let hits: Vec<usize> = (2..=301).filter(|_| s.step(0.9995)).collect();
        assert_eq!(hits, vec![151, 301]);
    }

    #[test]
    fn standardization_round_trip() {
        for y in 19..=62 {
            let y = y as f64;
            assert!((destandardize(standardize(y, 33.1, 11.2), 33.1, 11.2) - y).abs() < 1e-9);
        }
    }
}
