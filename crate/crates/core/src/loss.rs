//! Training objective: per-hit semantic cross-entropy plus a
//! permutation-invariant instance loss.
//!
//! Instance ids are arbitrary, so the instance head predicts one of `S`
//! slots and every true instance is matched to the slot that explains its
//! hits best. The matching is solved on plain values and is not
//! differentiated through.

use thiserror::Error;

use crate::assignment::{linear_sum_assignment, AssignError, CostMatrix};
use crate::autodiff::{Tape, TensorError, Var};
use crate::event::Event;
use crate::model::ForwardOutput;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Assign(#[from] AssignError),
    #[error("event has {found} instances but the model has {slots} slots")]
    TooManyInstances { found: usize, slots: usize },
    #[error("labels for {labels} hits, logits for {rows}")]
    LabelCount { labels: usize, rows: usize },
    #[error("mixing weight {0} outside [0, 1]")]
    BadLambda(f64),
}

type Result<T> = std::result::Result<T, LossError>;

/// Which slot each true instance was matched to.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMatching {
    /// `slot_of[p]` for every instance id `p`; `None` when `p` has no hits.
    pub slot_of: Vec<Option<usize>>,
    /// Matching cost over all slots (dummy columns cost zero).
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub semantic: f64,
    pub instance: f64,
    pub total: f64,
    pub lambda: f64,
    pub matching: InstanceMatching,
}

fn check_rows(tape: &Tape, logits: &[Var; 2], labels: [&[usize]; 2]) -> Result<usize> {
    let mut n = 0;
    for j in 0..2 {
        let rows = tape.shape(logits[j]).0;
        if rows != labels[j].len() {
            return Err(LossError::LabelCount {
                labels: labels[j].len(),
                rows,
            });
        }
        n += rows;
    }
    Ok(n)
}

fn zero(tape: &mut Tape) -> Var {
    tape.constant_matrix(1, 1, vec![0.0])
}

/// Mean cross-entropy over the hits of both views.
pub fn semantic_loss(tape: &mut Tape, logits: &[Var; 2], labels: [&[usize]; 2]) -> Result<Var> {
    let n = check_rows(tape, logits, labels)?;
    if n == 0 {
        return Ok(zero(tape));
    }
    let a = tape.cross_entropy_sum(logits[0], labels[0].to_vec())?;
    let b = tape.cross_entropy_sum(logits[1], labels[1].to_vec())?;
    let s = tape.add(a, b)?;
    Ok(tape.scale(s, 1.0 / n as f64)?)
}

fn log_softmax_rows(values: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    for row in values.chunks(cols) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lz = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
        out.extend(row.iter().map(|v| v - lz));
    }
    out
}

/// Matches true instances to slots, then takes the mean cross-entropy
/// against the matched slots.
///
/// `cost[s][p]` is the mean over hits of instance `p` of `-log P(slot s)`;
/// instance columns are padded with zero-cost dummies up to `S`.
pub fn instance_loss(
    tape: &mut Tape,
    logits: &[Var; 2],
    labels: [&[usize]; 2],
) -> Result<(Var, InstanceMatching)> {
    let n = check_rows(tape, logits, labels)?;
    let slots = tape.shape(logits[0]).1.max(tape.shape(logits[1]).1);
    if n == 0 {
        return Ok((
            zero(tape),
            InstanceMatching {
                slot_of: Vec::new(),
                cost: 0.0,
            },
        ));
    }
    let n_ids = labels
        .iter()
        .flat_map(|l| l.iter())
        .max()
        .map_or(0, |m| m + 1);
    let mut present = vec![false; n_ids];
    for l in labels.iter().flat_map(|l| l.iter()) {
        present[*l] = true;
    }
    let ids: Vec<usize> = (0..n_ids).filter(|&p| present[p]).collect();
    if ids.len() > slots {
        return Err(LossError::TooManyInstances {
            found: ids.len(),
            slots,
        });
    }
    let mut col_of_id = vec![usize::MAX; n_ids];
    for (c, &p) in ids.iter().enumerate() {
        col_of_id[p] = c;
    }

    // column sums of -log p, accumulated in hit order
    let mut sums = vec![0.0; slots * ids.len()];
    let mut counts = vec![0usize; ids.len()];
    for j in 0..2 {
        let lp = log_softmax_rows(tape.value(logits[j]), slots);
        for (i, &p) in labels[j].iter().enumerate() {
            let c = col_of_id[p];
            counts[c] += 1;
            for s in 0..slots {
                sums[s * ids.len() + c] -= lp[i * slots + s];
            }
        }
    }
    let data: Vec<f64> = sums
        .iter()
        .enumerate()
        .map(|(i, v)| v / counts[i % ids.len()] as f64)
        .collect();
    let cost = CostMatrix::padded(slots, ids.len(), &data, 0.0)?;
    let assignment = linear_sum_assignment(&cost);
    let mut slot_of = vec![None; n_ids];
    for (s, &c) in assignment.col_for_row.iter().enumerate() {
        if c < ids.len() {
            slot_of[ids[c]] = Some(s);
        }
    }

    let mut parts = Vec::with_capacity(2);
    for j in 0..2 {
        let targets: Vec<usize> = labels[j].iter().map(|&p| slot_of[p].unwrap()).collect();
        parts.push(tape.cross_entropy_sum(logits[j], targets)?);
    }
    let s = tape.add(parts[0], parts[1])?;
    let loss = tape.scale(s, 1.0 / n as f64)?;
    Ok((
        loss,
        InstanceMatching {
            slot_of,
            cost: assignment.total_cost,
        },
    ))
}

/// `lambda * semantic + (1 - lambda) * instance`.
pub fn total_loss(tape: &mut Tape, semantic: Var, instance: Var, lambda: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(LossError::BadLambda(lambda));
    }
    let a = tape.scale(semantic, lambda)?;
    let b = tape.scale(instance, 1.0 - lambda)?;
    Ok(tape.add(a, b)?)
}

/// Full objective for one event given the network outputs.
pub fn event_loss(
    tape: &mut Tape,
    out: &ForwardOutput,
    event: &Event,
    lambda: f64,
) -> Result<(Var, LossBreakdown)> {
    let sem_labels: [Vec<usize>; 2] = [0, 1].map(|j| {
        event.views[j]
            .hits
            .iter()
            .map(|h| h.sem_label as usize)
            .collect()
    });
    let ins_labels: [Vec<usize>; 2] = [0, 1].map(|j| {
        event.views[j]
            .hits
            .iter()
            .map(|h| h.ins_label as usize)
            .collect()
    });
    let sem = semantic_loss(tape, &out.sem, [&sem_labels[0], &sem_labels[1]])?;
    let (ins, matching) = instance_loss(tape, &out.ins, [&ins_labels[0], &ins_labels[1]])?;
    let total = total_loss(tape, sem, ins, lambda)?;
    Ok((
        total,
        LossBreakdown {
            semantic: tape.scalar(sem),
            instance: tape.scalar(ins),
            total: tape.scalar(total),
            lambda,
            matching,
        },
    ))
}
