//! Phrase grounding metrics.
//!
//! A phrase scores each region by the largest attention weight any of its
//! tokens gives that region; regions are ranked by that score. Recall@k asks
//! whether one of the top-k boxes overlaps a ground-truth box at IoU ≥ 0.5,
//! pointing accuracy whether the top box's center falls inside one.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::attention::{compatibility_batch, GroundingModel};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::math::{Matrix, Mode};

pub const IOU_THRESHOLD: f64 = 0.5;
pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

/// Regions of one phrase ranked best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhrasePrediction {
    pub span: (usize, usize),
    /// `(region index, score)`, scores non-increasing.
    pub ranking: Vec<(usize, f64)>,
    /// Boxes in ranking order.
    pub ranked_boxes: Vec<BBox>,
}

impl PhrasePrediction {
    /// Ranks regions by score, lower index first on ties.
    pub fn from_scores(span: (usize, usize), scores: &[f64], boxes: &[BBox]) -> Result<Self> {
        if scores.len() != boxes.len() {
            return Err(Error::shape("phrase prediction", boxes.len(), scores.len()));
        }
        let mut ranking: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
        ranking.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let ranked_boxes = ranking.iter().map(|&(i, _)| boxes[i]).collect();
        Ok(PhrasePrediction {
            span,
            ranking,
            ranked_boxes,
        })
    }

    pub fn selected_box(&self) -> Option<BBox> {
        self.ranked_boxes.first().copied()
    }

    /// Center of the selected box.
    pub fn point(&self) -> Option<(f64, f64)> {
        self.selected_box().map(|b| b.center())
    }
}

/// `score_i = max_{j in span} weights[i][j]` from an `m × n` weight matrix.
pub fn phrase_scores_from_weights(weights: &Matrix, span: (usize, usize)) -> Result<Vec<f64>> {
    if span.0 >= span.1 {
        return Err(Error::Invalid(format!("empty phrase span {span:?}")));
    }
    if span.1 > weights.cols() {
        return Err(Error::OutOfRange {
            index: span.1 - 1,
            len: weights.cols(),
        });
    }
    Ok(weights
        .iter_rows()
        .map(|row| row[span.0..span.1].iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect())
}

pub fn phrase_region_scores(
    model: &GroundingModel,
    regions: &crate::attention::RegionSet,
    caption: &crate::attention::CaptionTokens,
    span: (usize, usize),
) -> Result<Vec<f64>> {
    let model = eval_view(model);
    phrase_scores_from_weights(&compatibility_batch(&model, regions, caption)?.weights, span)
}

fn eval_view(model: &GroundingModel) -> std::borrow::Cow<'_, GroundingModel> {
    if model.mode() == Mode::Eval {
        std::borrow::Cow::Borrowed(model)
    } else {
        std::borrow::Cow::Owned(model.eval_copy())
    }
}

/// Hit fractions over phrases that have ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub recall_at: BTreeMap<usize, f64>,
    pub evaluated: usize,
    /// Phrases without any ground-truth box.
    pub excluded: usize,
}

pub fn recall_at_k(predictions: &[PhrasePrediction], ground_truth: &[Vec<BBox>], ks: &[usize]) -> Result<RecallReport> {
    if ks.is_empty() {
        return Err(Error::Invalid("no k values given".into()));
    }
    if predictions.len() != ground_truth.len() {
        return Err(Error::shape("recall_at_k", predictions.len(), ground_truth.len()));
    }
    let mut hits = vec![0usize; ks.len()];
    let mut evaluated = 0;
    for (pred, gt) in predictions.iter().zip(ground_truth) {
        if gt.is_empty() {
            continue;
        }
        evaluated += 1;
        // rank of the first box that matches any ground truth
        let first = pred
            .ranked_boxes
            .iter()
            .position(|b| gt.iter().any(|g| b.iou(g) >= IOU_THRESHOLD));
        for (h, &k) in hits.iter_mut().zip(ks) {
            if first.is_some_and(|r| r < k) {
                *h += 1;
            }
        }
    }
    Ok(RecallReport {
        recall_at: ks
            .iter()
            .zip(&hits)
            .map(|(&k, &h)| (k, fraction(h, evaluated)))
            .collect(),
        evaluated,
        excluded: predictions.len() - evaluated,
    })
}

fn fraction(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// `(accuracy, evaluated, excluded)`; boundary points count as inside.
pub fn pointing_accuracy(predictions: &[PhrasePrediction], ground_truth: &[Vec<BBox>]) -> Result<(f64, usize, usize)> {
    if predictions.len() != ground_truth.len() {
        return Err(Error::shape("pointing_accuracy", predictions.len(), ground_truth.len()));
    }
    let mut hits = 0;
    let mut evaluated = 0;
    for (pred, gt) in predictions.iter().zip(ground_truth) {
        if gt.is_empty() {
            continue;
        }
        evaluated += 1;
        if pred.point().is_some_and(|p| gt.iter().any(|g| g.contains(p))) {
            hits += 1;
        }
    }
    Ok((fraction(hits, evaluated), evaluated, predictions.len() - evaluated))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recall_at: BTreeMap<usize, f64>,
    pub pointing_accuracy: f64,
    pub phrases: usize,
    pub excluded: usize,
}

impl EvalReport {
    pub fn recall(&self, k: usize) -> f64 {
        self.recall_at.get(&k).copied().unwrap_or(f64::NAN)
    }
}

/// Predictions for every annotated phrase, with their ground truth.
pub fn predict(model: &GroundingModel, dataset: &Dataset) -> Result<(Vec<PhrasePrediction>, Vec<Vec<BBox>>)> {
    let model = eval_view(model);
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for ex in dataset.examples() {
        if ex.phrases.is_empty() {
            continue;
        }
        let weights = compatibility_batch(&model, ex.regions, ex.caption)?.weights;
        for p in ex.phrases {
            let scores = phrase_scores_from_weights(&weights, p.span)?;
            preds.push(PhrasePrediction::from_scores(p.span, &scores, &ex.regions.boxes)?);
            gts.push(p.boxes.clone());
        }
    }
    Ok((preds, gts))
}

pub fn report_from_predictions(preds: &[PhrasePrediction], gts: &[Vec<BBox>], ks: &[usize]) -> Result<EvalReport> {
    let recall = recall_at_k(preds, gts, ks)?;
    let (acc, _, _) = pointing_accuracy(preds, gts)?;
    Ok(EvalReport {
        recall_at: recall.recall_at,
        pointing_accuracy: acc,
        phrases: recall.evaluated,
        excluded: recall.excluded,
    })
}

/// Eval-mode grounding metrics over a dataset; the model is not modified.
pub fn evaluate(model: &GroundingModel, dataset: &Dataset) -> Result<EvalReport> {
    let (preds, gts) = predict(model, dataset)?;
    report_from_predictions(&preds, &gts, &DEFAULT_KS)
}

/// `epoch,recall@1,recall@5,recall@10,pointing_accuracy` rows.
pub struct EvalCsv<W: Write> {
    out: W,
}

impl<W: Write> EvalCsv<W> {
    pub const HEADER: &'static str = "epoch,recall@1,recall@5,recall@10,pointing_accuracy";

    pub fn new(mut out: W, write_header: bool) -> Result<Self> {
        if write_header {
            writeln!(out, "{}", Self::HEADER).map_err(|e| Error::io("<eval csv>", e))?;
        }
        Ok(EvalCsv { out })
    }

    pub fn append(&mut self, epoch: usize, r: &EvalReport) -> Result<()> {
        writeln!(
            self.out,
            "{epoch},{},{},{},{}",
            r.recall(1),
            r.recall(5),
            r.recall(10),
            r.pointing_accuracy
        )
        .map_err(|e| Error::io("<eval csv>", e))
    }
}
