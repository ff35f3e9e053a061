//! Optimization loop, Adam and checkpoint files.
//!
//! Batches are formed by gradient accumulation: per-event gradients may be
//! computed on worker threads, but they are summed in batch order, so the
//! result does not depend on the schedule.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::autodiff::{Tape, Tensor, TensorError};
use crate::event::{read_events, Event, EventIoError, LabelSpace};
use crate::loss::{event_loss, LossError};
use crate::metrics::{ovr_auc, segmentation_agreement};
use crate::model::{
    forward, init_weights, prediction_from_output, HyperParams, ModelError, ModelWeights,
};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HPST";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("non-finite loss on event {event_id}: {reason}")]
    NonFiniteLoss { event_id: u64, reason: String },
    #[error("shape mismatch for {0}")]
    ShapeMismatch(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] EventIoError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lambda: f64,
    /// Events per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub hyper: HyperParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            lr: 1e-3,
            lambda: 0.5,
            batch_size: 16,
            seed: 0,
            patience: 0,
            hyper: HyperParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.epochs < 1 {
            return bad("epochs must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must lie in [0, 1]");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        self.hyper.validate()?;
        Ok(())
    }

    pub fn check_labels(&self, labels: LabelSpace) -> Result<()> {
        if labels.n_classes as usize != self.hyper.n_classes {
            return Err(TrainError::ConfigMismatch(format!(
                "dataset has {} classes, model {}",
                labels.n_classes, self.hyper.n_classes
            )));
        }
        if labels.p_max as usize > self.hyper.instance_slots {
            return Err(TrainError::ConfigMismatch(format!(
                "dataset allows {} instances, model has {} slots",
                labels.p_max, self.hyper.instance_slots
            )));
        }
        Ok(())
    }
}

/// Adam moments, one entry per parameter path.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(weights: &ModelWeights) -> Self {
        let zeros: BTreeMap<String, Vec<f64>> = weights
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), vec![0.0; t.len()]))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One bias-corrected Adam update, applied in parameter-path order.
pub fn adam_step(
    weights: &mut ModelWeights,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    for (k, t) in &weights.tensors {
        let ok = grads.get(k).is_some_and(|g| g.len() == t.len())
            && state.m.get(k).is_some_and(|m| m.len() == t.len());
        if !ok {
            return Err(TrainError::ShapeMismatch(k.clone()));
        }
    }
    if grads.len() != weights.tensors.len() {
        return Err(TrainError::ShapeMismatch("gradient set".into()));
    }
    state.step += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
    for (k, t) in weights.tensors.iter_mut() {
        let g = &grads[k];
        let m = state.m.get_mut(k).unwrap();
        let v = state.v.get_mut(k).unwrap();
        for i in 0..t.data.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            t.data[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTotals {
    pub semantic: f64,
    pub instance: f64,
    pub total: f64,
}

fn non_finite(event_id: u64, reason: impl ToString) -> TrainError {
    TrainError::NonFiniteLoss {
        event_id,
        reason: reason.to_string(),
    }
}

fn classify(event_id: u64, e: LossError) -> TrainError {
    match e {
        LossError::Tensor(t @ (TensorError::NonFinite { .. } | TensorError::NonFiniteGradient)) => {
            non_finite(event_id, t)
        }
        other => TrainError::InvalidConfig(format!("event {event_id}: {other}")),
    }
}

/// Loss and parameter gradients for one event, in parameter-path order.
pub fn event_gradients(
    weights: &ModelWeights,
    event: &Event,
    config: &TrainConfig,
) -> Result<(LossTotals, Vec<Vec<f64>>)> {
    let id = event.event_id;
    let mut tape = Tape::new();
    let params = weights.bind(&mut tape, true);
    let out = forward(&mut tape, event, &params, &config.hyper).map_err(|e| match e {
        ModelError::Tensor(t) => non_finite(id, t),
        other => TrainError::Model(other),
    })?;
    let (loss, parts) =
        event_loss(&mut tape, &out, event, config.lambda).map_err(|e| classify(id, e))?;
    if !parts.total.is_finite() {
        return Err(non_finite(id, "loss"));
    }
    let grads = tape.backward(loss).map_err(|e| non_finite(id, e))?;
    let flat = params.vars.values().map(|&v| grads.get(v)).collect();
    Ok((
        LossTotals {
            semantic: parts.semantic,
            instance: parts.instance,
            total: parts.total,
        },
        flat,
    ))
}

/// Mean gradient over a batch; per-event work runs in parallel, the sum is
/// taken sequentially in batch order.
pub fn batch_gradients(
    weights: &ModelWeights,
    batch: &[&Event],
    config: &TrainConfig,
) -> Result<(LossTotals, BTreeMap<String, Vec<f64>>)> {
    let per_event: Vec<(LossTotals, Vec<Vec<f64>>)> = batch
        .par_iter()
        .map(|e| event_gradients(weights, e, config))
        .collect::<Result<_>>()?;
    let mut sum: Vec<Vec<f64>> = weights
        .tensors
        .values()
        .map(|t| vec![0.0; t.len()])
        .collect();
    let mut totals = LossTotals::default();
    for (l, g) in &per_event {
        totals.semantic += l.semantic;
        totals.instance += l.instance;
        totals.total += l.total;
        for (acc, gi) in sum.iter_mut().zip(g) {
            for (a, b) in acc.iter_mut().zip(gi) {
                *a += b;
            }
        }
    }
    let scale = 1.0 / batch.len() as f64;
    let grads = weights
        .tensors
        .keys()
        .cloned()
        .zip(
            sum.into_iter()
                .map(|g| g.into_iter().map(|x| x * scale).collect()),
        )
        .collect();
    Ok((totals, grads))
}

fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Events whose id hashes to 0 mod 10 are held out for validation.
pub fn is_validation(event_id: u64) -> bool {
    mix(event_id) % 10 == 0
}

pub fn split_validation(events: Vec<Event>) -> (Vec<Event>, Vec<Event>) {
    events.into_iter().partition(|e| !is_validation(e.event_id))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: u64,
    pub train_semantic: f64,
    pub train_instance: f64,
    pub train_total: f64,
    pub val_total: Option<f64>,
    pub val_macro_auc: Option<f64>,
    pub val_segmentation_accuracy: Option<f64>,
    pub best: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationSummary {
    pub loss: LossTotals,
    pub macro_auc: Option<f64>,
    pub segmentation_accuracy: Option<f64>,
}

/// Mean loss plus hit-level metrics over held-out events, from one forward
/// pass per event.
pub fn validate_on(
    weights: &ModelWeights,
    events: &[Event],
    config: &TrainConfig,
) -> Result<ValidationSummary> {
    let h = &config.hyper;
    let per: Vec<(LossTotals, crate::model::Prediction)> = events
        .par_iter()
        .map(|e| {
            let mut tape = Tape::new();
            let params = weights.bind(&mut tape, false);
            let out = forward(&mut tape, e, &params, h)?;
            let (_, parts) = event_loss(&mut tape, &out, e, config.lambda)
                .map_err(|x| classify(e.event_id, x))?;
            let loss = LossTotals {
                semantic: parts.semantic,
                instance: parts.instance,
                total: parts.total,
            };
            Ok((loss, prediction_from_output(&tape, &out, h)))
        })
        .collect::<Result<_>>()?;
    let mut sum = LossTotals::default();
    let mut probs = Vec::new();
    let mut truth = Vec::new();
    let mut agree = 0;
    for ((l, p), e) in per.iter().zip(events) {
        sum.semantic += l.semantic;
        sum.instance += l.instance;
        sum.total += l.total;
        probs.extend(p.class_probs.iter().cloned());
        truth.extend(e.sem_labels());
        agree += segmentation_agreement(&p.slots, &e.ins_labels()).unwrap_or(0);
    }
    let n = events.len().max(1) as f64;
    Ok(ValidationSummary {
        loss: LossTotals {
            semantic: sum.semantic / n,
            instance: sum.instance / n,
            total: sum.total / n,
        },
        macro_auc: ovr_auc(&probs, &truth, h.n_classes)
            .ok()
            .map(|r| r.macro_auc),
        segmentation_accuracy: (!truth.is_empty()).then(|| agree as f64 / truth.len() as f64),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    /// Weights of the best epoch (by validation loss, or training loss when
    /// there is no validation set).
    pub weights: ModelWeights,
    pub best_epoch: usize,
    pub history: Vec<EpochLog>,
}

/// Trains from a deterministic initialization on in-memory events.
pub fn train_events(
    train: &[Event],
    val: &[Event],
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainResult> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::InvalidConfig("no training events".into()));
    }
    let mut weights = init_weights(&config.hyper, config.seed)?;
    let mut state = OptimizerState::new(&weights);
    let mut best: Option<(f64, usize, ModelWeights)> = None;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed ^ mix(epoch as u64)));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut sum = LossTotals::default();
        for chunk in order.chunks(config.batch_size) {
            let mut batch: Vec<&Event> = chunk.iter().map(|&i| &train[i]).collect();
            batch.sort_by_key(|e| e.event_id);
            let (l, g) = batch_gradients(&weights, &batch, config)?;
            sum.semantic += l.semantic;
            sum.instance += l.instance;
            sum.total += l.total;
            adam_step(&mut weights, &g, &mut state, config.lr)?;
        }
        let n = train.len() as f64;
        let vs = if val.is_empty() {
            None
        } else {
            Some(validate_on(&weights, val, config)?)
        };
        let score = vs.as_ref().map_or(sum.total / n, |v| v.loss.total);
        let improved = best.as_ref().is_none_or(|b| score < b.0);
        if improved {
            best = Some((score, epoch, weights.clone()));
        }
        let log = EpochLog {
            epoch,
            steps: state.step,
            train_semantic: sum.semantic / n,
            train_instance: sum.instance / n,
            train_total: sum.total / n,
            val_total: vs.as_ref().map(|v| v.loss.total),
            val_macro_auc: vs.as_ref().and_then(|v| v.macro_auc),
            val_segmentation_accuracy: vs.as_ref().and_then(|v| v.segmentation_accuracy),
            best: improved,
        };
        on_epoch(&log);
        history.push(log);
        let best_epoch = best.as_ref().map_or(epoch, |b| b.1);
        if config.patience > 0 && epoch - best_epoch >= config.patience {
            break;
        }
    }
    let (_, best_epoch, weights) = best.expect("at least one epoch ran");
    Ok(TrainResult {
        weights,
        best_epoch,
        history,
    })
}

pub fn log_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".log");
    PathBuf::from(s)
}

/// Trains on a dataset file, writing the best checkpoint to `out` and one
/// JSON line per epoch to `out` + ".log".
pub fn train(dataset: &Path, config: &TrainConfig, out: &Path) -> Result<TrainResult> {
    config.validate()?;
    let (header, events) = read_events(dataset)?;
    config.check_labels(header.labels())?;
    let (train_set, val_set) = split_validation(events);
    let mut log = fs::File::create(log_path(out))?;
    let mut io_err = None;
    let result = train_events(&train_set, &val_set, config, &mut |l| {
        let line = serde_json::to_string(l).expect("epoch log serializes");
        if let Err(e) = writeln!(log, "{line}") {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    save_checkpoint(&result.weights, &config.hyper, out)?;
    Ok(result)
}

pub fn checkpoint_bytes(weights: &ModelWeights, hyper: &HyperParams) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(CHECKPOINT_MAGIC);
    b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let pairs = hyper.to_pairs();
    b.extend_from_slice(&(pairs.len() as u32).to_le_bytes());
    for (k, v) in pairs {
        b.extend_from_slice(&(k.len() as u16).to_le_bytes());
        b.extend_from_slice(k.as_bytes());
        b.extend_from_slice(&v.to_le_bytes());
    }
    b.extend_from_slice(&(weights.tensors.len() as u32).to_le_bytes());
    for (name, t) in &weights.tensors {
        b.extend_from_slice(&(name.len() as u16).to_le_bytes());
        b.extend_from_slice(name.as_bytes());
        b.push(t.shape.len() as u8);
        for &d in &t.shape {
            b.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in &t.data {
            b.extend_from_slice(&x.to_le_bytes());
        }
    }
    b
}

pub fn save_checkpoint(weights: &ModelWeights, hyper: &HyperParams, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(weights, hyper))?;
    Ok(())
}

struct Reader<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.b.len() - self.at < n {
            return Err(TrainError::CorruptCheckpoint(format!(
                "truncated at byte {}",
                self.at
            )));
        }
        let s = &self.b[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| TrainError::CorruptCheckpoint("name is not UTF-8".into()))
    }
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<(ModelWeights, HyperParams)> {
    let corrupt = |m: String| TrainError::CorruptCheckpoint(m);
    let mut r = Reader { b: bytes, at: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let n_pairs = r.u32()? as usize;
    let mut pairs = Vec::new();
    for _ in 0..n_pairs {
        let k = r.string()?;
        pairs.push((k, r.f64()?));
    }
    let hyper = HyperParams::from_pairs(&pairs).map_err(|e| corrupt(e.to_string()))?;
    let n_tensors = r.u32()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..n_tensors {
        let name = r.string()?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        if len > (bytes.len() - r.at) / 8 {
            return Err(corrupt(format!(
                "tensor {name} runs past the end of the file"
            )));
        }
        let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<f64>>>()?;
        let t = Tensor::new(shape, data).map_err(|e| corrupt(e.to_string()))?;
        tensors.insert(name, t);
    }
    if r.at != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    let weights = ModelWeights { tensors };
    weights.check_against(&hyper).map_err(corrupt)?;
    Ok((weights, hyper))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelWeights, HyperParams)> {
    parse_checkpoint(&fs::read(path)?)
}

/// Loads a checkpoint and insists it was written for `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &HyperParams) -> Result<ModelWeights> {
    let (w, h) = load_checkpoint(path)?;
    if &h != expected {
        return Err(TrainError::ConfigMismatch(format!(
            "checkpoint built for {h:?}, expected {expected:?}"
        )));
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::parameter_shapes;

    fn scalar_weights(x: f64) -> ModelWeights {
        let mut tensors = BTreeMap::new();
        tensors.insert("x".to_string(), Tensor::new(vec![1], vec![x]).unwrap());
        ModelWeights { tensors }
    }

    fn grads(g: f64) -> BTreeMap<String, Vec<f64>> {
        BTreeMap::from([("x".to_string(), vec![g])])
    }

    #[test]
    fn adam_zero_gradient_keeps_weights() {
        let mut w = scalar_weights(0.3);
        let mut s = OptimizerState::new(&w);
        adam_step(&mut w, &grads(0.0), &mut s, 0.1).unwrap();
        assert_eq!(w.get("x").unwrap().data, vec![0.3]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        for g in [2.5, -0.01] {
            let mut w = scalar_weights(0.0);
            let mut s = OptimizerState::new(&w);
            adam_step(&mut w, &grads(g), &mut s, 0.01).unwrap();
            let moved = w.get("x").unwrap().data[0];
            assert!((moved + 0.01 * g.signum()).abs() < 1e-8);
        }
    }

    #[test]
    fn adam_matches_scalar_recomputation() {
        let gs = [0.5, -1.0, 2.0];
        let mut w = scalar_weights(1.0);
        let mut s = OptimizerState::new(&w);
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for (t, &g) in gs.iter().enumerate() {
            adam_step(&mut w, &grads(g), &mut s, 0.05).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32 + 1));
            let vh = v / (1.0 - 0.999f64.powi(t as i32 + 1));
            x -= 0.05 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((w.get("x").unwrap().data[0] - x).abs() < 1e-15);
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut w = scalar_weights(1.0);
        let mut s = OptimizerState::new(&w);
        let bad = BTreeMap::from([("x".to_string(), vec![1.0, 2.0])]);
        assert!(matches!(
            adam_step(&mut w, &bad, &mut s, 0.1),
            Err(TrainError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn config_validation() {
        let c = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(c.validate(), Err(TrainError::InvalidConfig(_))));
        let c = TrainConfig::default();
        assert!(c
            .check_labels(LabelSpace {
                n_classes: 5,
                p_max: 8
            })
            .is_err());
        assert!(c.check_labels(LabelSpace::default()).is_ok());
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let h = HyperParams {
            base_dim: 4,
            ..HyperParams::default()
        };
        let w = init_weights(&h, 9).unwrap();
        let bytes = checkpoint_bytes(&w, &h);
        let (w2, h2) = parse_checkpoint(&bytes).unwrap();
        assert_eq!(h2, h);
        for (k, t) in &w.tensors {
            let a: Vec<u64> = t.data.iter().map(|x| x.to_bits()).collect();
            let b: Vec<u64> = w2.tensors[k].data.iter().map(|x| x.to_bits()).collect();
            assert_eq!(a, b);
        }
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                parse_checkpoint(&bytes[..cut]),
                Err(TrainError::CorruptCheckpoint(_))
            ));
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            parse_checkpoint(&bad),
            Err(TrainError::CorruptCheckpoint(_))
        ));
        assert_eq!(parameter_shapes(&h).len(), w2.tensors.len());
    }

    #[test]
    fn validation_split_is_about_ten_percent() {
        let n = (0..10_000u64).filter(|&i| is_validation(i)).count();
        assert!((850..1150).contains(&n), "{n}");
    }
}
