//! Evaluation metrics: hit-level one-vs-rest AUC, segmentation accuracy and
//! prong purity/efficiency.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::assignment::{max_weight_assignment, CostMatrix};
use crate::event::Event;
use crate::model::{predict, HyperParams, ModelError, ModelWeights, Prediction};

pub const HIST_BINS: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("need at least 2 hits, got {0}")]
    DegenerateInput(usize),
    #[error("probability row {row} sums to {sum}")]
    BadProbabilities { row: usize, sum: f64 },
    #[error("{what}: {left} vs {right} entries")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("prediction failed on event {event_id}: {source}")]
    Predict { event_id: u64, source: ModelError },
}

type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AucReport {
    /// `None` for classes without positives or without negatives.
    pub per_class: Vec<Option<f64>>,
    /// Unweighted mean over the classes that have a value.
    pub macro_auc: f64,
}

/// Mann–Whitney AUC with midranks for tied scores.
fn rank_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if positive[k] {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

pub fn ovr_auc(probs: &[Vec<f64>], truth: &[usize], n_classes: usize) -> Result<AucReport> {
    if probs.len() != truth.len() {
        return Err(MetricsError::LengthMismatch {
            what: "scores and labels",
            left: probs.len(),
            right: truth.len(),
        });
    }
    if probs.len() < 2 {
        return Err(MetricsError::DegenerateInput(probs.len()));
    }
    for (row, p) in probs.iter().enumerate() {
        let sum: f64 = p.iter().sum();
        if p.len() != n_classes || (sum - 1.0).abs() > 1e-6 {
            return Err(MetricsError::BadProbabilities { row, sum });
        }
    }
    let per_class: Vec<Option<f64>> = (0..n_classes)
        .map(|c| {
            let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
            let pos: Vec<bool> = truth.iter().map(|&t| t == c).collect();
            rank_auc(&scores, &pos)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(MetricsError::DegenerateInput(probs.len()));
    }
    let macro_auc = present.iter().sum::<f64>() / present.len() as f64;
    Ok(AucReport {
        per_class,
        macro_auc,
    })
}

fn dense_ids(labels: &[usize]) -> (Vec<usize>, usize) {
    let n = labels.iter().max().map_or(0, |m| m + 1);
    let mut map = vec![usize::MAX; n];
    let mut next = 0;
    for &l in labels {
        if map[l] == usize::MAX {
            map[l] = next;
            next += 1;
        }
    }
    (labels.iter().map(|&l| map[l]).collect(), next)
}

/// Hits that agree under the best one-to-one slot/instance matching.
pub fn segmentation_agreement(pred: &[usize], truth: &[usize]) -> Result<usize> {
    if pred.len() != truth.len() {
        return Err(MetricsError::LengthMismatch {
            what: "predicted and true instances",
            left: pred.len(),
            right: truth.len(),
        });
    }
    if pred.is_empty() {
        return Ok(0);
    }
    let (p, np) = dense_ids(pred);
    let (t, nt) = dense_ids(truth);
    let mut overlap = vec![0.0; np * nt];
    for (a, b) in p.iter().zip(&t) {
        overlap[a * nt + b] += 1.0;
    }
    let m = CostMatrix::padded(np, nt, &overlap, 0.0).expect("finite overlap counts");
    Ok(max_weight_assignment(&m).total_cost as usize)
}

/// Fraction of hits that agree under the best slot/instance matching.
pub fn segmentation_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let agree = segmentation_agreement(pred, truth)?;
    Ok(if truth.is_empty() {
        1.0
    } else {
        agree as f64 / truth.len() as f64
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProngScore {
    pub event_id: u64,
    pub true_id: usize,
    pub class_id: usize,
    pub efficiency: f64,
    pub purity: f64,
    pub n_hits: usize,
}

/// Scores every true prong. Each predicted prong goes to the true prong it
/// overlaps most (ties to the lower id); several predicted prongs may share
/// one true prong. The class of a true prong is the most common semantic
/// label of its hits.
pub fn prong_purity_efficiency(
    event_id: u64,
    pred: &[usize],
    truth: &[usize],
    sem: &[usize],
) -> Result<Vec<ProngScore>> {
    if pred.len() != truth.len() || sem.len() != truth.len() {
        return Err(MetricsError::LengthMismatch {
            what: "prong labels",
            left: pred.len(),
            right: truth.len(),
        });
    }
    let nt = truth.iter().max().map_or(0, |m| m + 1);
    let np = pred.iter().max().map_or(0, |m| m + 1);
    let mut overlap = vec![0usize; np * nt];
    for (a, b) in pred.iter().zip(truth) {
        overlap[a * nt + b] += 1;
    }
    let mut owner = vec![None; np];
    for (s, o) in owner.iter_mut().enumerate() {
        let row = &overlap[s * nt..(s + 1) * nt];
        let mut best: Option<usize> = None;
        for (t, &c) in row.iter().enumerate() {
            if c > 0 && best.is_none_or(|b| c > row[b]) {
                best = Some(t);
            }
        }
        *o = best;
    }
    let mut pred_size = vec![0usize; np];
    for &a in pred {
        pred_size[a] += 1;
    }
    let n_classes = sem.iter().max().map_or(0, |m| m + 1);
    let mut out = Vec::new();
    for t in 0..nt {
        let size = truth.iter().filter(|&&x| x == t).count();
        if size == 0 {
            continue;
        }
        let mut class_votes = vec![0usize; n_classes];
        for (i, &x) in truth.iter().enumerate() {
            if x == t {
                class_votes[sem[i]] += 1;
            }
        }
        let class_id = (0..n_classes).fold(0, |b, c| {
            if class_votes[c] > class_votes[b] {
                c
            } else {
                b
            }
        });
        let mut covered = 0;
        let mut union = 0;
        for s in 0..np {
            if owner[s] == Some(t) {
                covered += overlap[s * nt + t];
                union += pred_size[s];
            }
        }
        let purity = if union == 0 {
            0.0
        } else {
            covered as f64 / union as f64
        };
        out.push(ProngScore {
            event_id,
            true_id: t,
            class_id,
            efficiency: covered as f64 / size as f64,
            purity,
            n_hits: size,
        });
    }
    Ok(out)
}

/// Anything that can label the hits of an event.
pub trait Predictor: Sync {
    fn n_classes(&self) -> usize;
    fn predict(&self, event: &Event) -> std::result::Result<Prediction, ModelError>;
}

/// A trained network ready for inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub hyper: HyperParams,
    pub weights: ModelWeights,
}

impl Predictor for Model {
    fn n_classes(&self) -> usize {
        self.hyper.n_classes
    }

    fn predict(&self, event: &Event) -> std::result::Result<Prediction, ModelError> {
        predict(event, &self.weights, &self.hyper)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassHistograms {
    pub class_id: usize,
    pub n_prongs: usize,
    pub efficiency: [usize; HIST_BINS],
    pub purity: [usize; HIST_BINS],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub n_events: usize,
    pub n_hits: usize,
    pub macro_auc: f64,
    pub per_class_auc: Vec<Option<f64>>,
    pub segmentation_accuracy: f64,
    pub histograms: Vec<ClassHistograms>,
    pub config: Vec<(String, String)>,
}

pub fn hist_bin(v: f64) -> usize {
    ((v * HIST_BINS as f64).floor() as usize).min(HIST_BINS - 1)
}

pub fn evaluate(
    events: &[Event],
    predictor: &dyn Predictor,
    config: Vec<(String, String)>,
) -> Result<EvalReport> {
    let preds: Vec<Prediction> = events
        .par_iter()
        .map(|e| {
            predictor
                .predict(e)
                .map_err(|source| MetricsError::Predict {
                    event_id: e.event_id,
                    source,
                })
        })
        .collect::<Result<_>>()?;
    let n_classes = predictor.n_classes();
    let mut probs = Vec::new();
    let mut truth = Vec::new();
    let mut agree = 0;
    let mut n_hits = 0;
    let mut hists: Vec<ClassHistograms> = (0..n_classes)
        .map(|c| ClassHistograms {
            class_id: c,
            n_prongs: 0,
            efficiency: [0; HIST_BINS],
            purity: [0; HIST_BINS],
        })
        .collect();
    for (e, p) in events.iter().zip(&preds) {
        let sem = e.sem_labels();
        let ins = e.ins_labels();
        probs.extend(p.class_probs.iter().cloned());
        truth.extend(sem.iter().copied());
        agree += segmentation_agreement(&p.slots, &ins)?;
        n_hits += ins.len();
        for s in prong_purity_efficiency(e.event_id, &p.slots, &ins, &sem)? {
            if let Some(h) = hists.get_mut(s.class_id) {
                h.n_prongs += 1;
                h.efficiency[hist_bin(s.efficiency)] += 1;
                h.purity[hist_bin(s.purity)] += 1;
            }
        }
    }
    let auc = ovr_auc(&probs, &truth, n_classes)?;
    Ok(EvalReport {
        n_events: events.len(),
        n_hits,
        macro_auc: auc.macro_auc,
        per_class_auc: auc.per_class,
        segmentation_accuracy: if n_hits == 0 {
            1.0
        } else {
            agree as f64 / n_hits as f64
        },
        histograms: hists,
        config,
    })
}

/// Histogram columns for external plotting: one row per (class, bin).
pub fn histogram_tsv(report: &EvalReport) -> String {
    let mut out = String::from("class\tbin_lo\tbin_hi\tefficiency\tpurity\n");
    for h in &report.histograms {
        for b in 0..HIST_BINS {
            out.push_str(&format!(
                "{}\t{:.2}\t{:.2}\t{}\t{}\n",
                h.class_id,
                b as f64 / HIST_BINS as f64,
                (b + 1) as f64 / HIST_BINS as f64,
                h.efficiency[b],
                h.purity[b]
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_extremes() {
        let probs = vec![
            vec![0.9, 0.1],
            vec![0.8, 0.2],
            vec![0.3, 0.7],
            vec![0.1, 0.9],
        ];
        let r = ovr_auc(&probs, &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(r.macro_auc, 1.0);
        let flat = vec![vec![0.5, 0.5]; 4];
        let r = ovr_auc(&flat, &[0, 1, 0, 1], 2).unwrap();
        assert_eq!(r.macro_auc, 0.5);
        assert_eq!(
            ovr_auc(&flat[..1], &[0], 2),
            Err(MetricsError::DegenerateInput(1))
        );
    }

    #[test]
    fn auc_skips_absent_classes() {
        let probs = vec![vec![0.6, 0.3, 0.1], vec![0.2, 0.7, 0.1]];
        let r = ovr_auc(&probs, &[0, 1], 3).unwrap();
        assert_eq!(r.per_class[2], None);
        assert_eq!(r.macro_auc, 1.0);
    }

    #[test]
    fn segmentation_examples() {
        assert_eq!(
            segmentation_accuracy(&[2, 2, 0, 1], &[0, 0, 1, 2]).unwrap(),
            1.0
        );
        assert_eq!(segmentation_accuracy(&[3, 3, 3], &[0, 0, 0]).unwrap(), 1.0);
        assert_eq!(
            segmentation_accuracy(&[0, 0, 0, 0], &[0, 0, 1, 1]).unwrap(),
            0.5
        );
    }

    #[test]
    fn prong_examples() {
        let s = prong_purity_efficiency(0, &[5, 5, 1], &[0, 0, 1], &[0, 0, 1]).unwrap();
        assert!(s.iter().all(|p| p.efficiency == 1.0 && p.purity == 1.0));

        // one predicted prong over two equal true prongs
        let s = prong_purity_efficiency(0, &[0, 0, 0, 0], &[0, 0, 1, 1], &[1, 1, 2, 2]).unwrap();
        assert_eq!((s[0].efficiency, s[0].purity), (1.0, 0.5));
        assert_eq!((s[1].efficiency, s[1].purity), (0.0, 0.0));
        assert_eq!(s[1].class_id, 2);

        // two predicted prongs covering one true prong
        let s = prong_purity_efficiency(0, &[0, 0, 1, 1], &[0, 0, 0, 0], &[0; 4]).unwrap();
        assert_eq!((s[0].efficiency, s[0].purity), (1.0, 1.0));
    }

    #[test]
    fn bins_cover_closed_interval() {
        assert_eq!(hist_bin(0.0), 0);
        assert_eq!(hist_bin(0.999), 19);
        assert_eq!(hist_bin(1.0), 19);
        assert_eq!(hist_bin(0.05), 1);
    }
}
