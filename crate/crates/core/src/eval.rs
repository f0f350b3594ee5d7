//! Detection geometry and metrics.
//!
//! Average precision uses all-points interpolation: the area under the
//! precision envelope (precision at recall `r` is the best precision at any
//! recall `≥ r`). Detections are matched greedily in descending score order,
//! each to the highest-IoU unmatched ground truth of its image.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::bbox::Bbox;
use crate::data::GroundTruth;
use crate::infer::{Detection, ImageOutput};
use crate::semantics::{ClassId, LabelSpace};
use crate::{Error, Result};

pub fn iou(a: &Bbox, b: &Bbox) -> f64 {
    let w = a.x2.min(b.x2) - a.x1.max(b.x1);
    let h = a.y2.min(b.y2) - a.y1.max(b.y1);
    if w <= 0.0 || h <= 0.0 {
        return 0.0;
    }
    let inter = w * h;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Indices sorted by descending score, ties by ascending index.
fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Greedy NMS over one class. Returns kept indices in descending score
/// order; a box is dropped when its IoU with a kept box exceeds `thresh`.
pub fn nms_indices(boxes: &[Bbox], scores: &[f64], thresh: f64) -> Vec<usize> {
    let order = score_order(scores);
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(&boxes[i], &boxes[j]) > thresh {
                suppressed[j] = true;
            }
        }
    }
    keep
}

pub fn nms<L: Clone>(detections: &[Detection<L>], thresh: f64) -> Vec<Detection<L>> {
    let boxes: Vec<Bbox> = detections.iter().map(|d| d.bbox).collect();
    let scores: Vec<f64> = detections.iter().map(|d| d.score).collect();
    nms_indices(&boxes, &scores, thresh)
        .into_iter()
        .map(|i| detections[i].clone())
        .collect()
}

/// NMS applied separately to each label; output grouped by ascending label.
pub fn per_class_nms<L: Clone + Ord>(
    detections: &[Detection<L>],
    thresh: f64,
) -> Vec<Detection<L>> {
    let mut labels: Vec<&L> = detections.iter().map(|d| &d.label).collect();
    labels.sort();
    labels.dedup();
    let mut out = Vec::with_capacity(detections.len());
    for label in labels {
        let group: Vec<Detection<L>> = detections
            .iter()
            .filter(|d| &d.label == label)
            .cloned()
            .collect();
        out.extend(nms(&group, thresh));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub image: usize,
    pub score: f64,
    pub bbox: Bbox,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthBox {
    pub image: usize,
    pub bbox: Bbox,
}

/// Area under the precision envelope for a ranked TP/FP list.
fn envelope_ap(is_tp: &[bool], num_positive: usize) -> f64 {
    let mut precision = Vec::with_capacity(is_tp.len());
    let mut tp = 0usize;
    for (rank, &hit) in is_tp.iter().enumerate() {
        if hit {
            tp += 1;
        }
        precision.push(tp as f64 / (rank + 1) as f64);
    }
    let mut best = 0.0f64;
    let mut ap = 0.0;
    for (rank, &hit) in is_tp.iter().enumerate().rev() {
        best = best.max(precision[rank]);
        if hit {
            ap += best;
        }
    }
    ap / num_positive as f64
}

/// Average precision of one class. `None` when there are no ground truths.
pub fn average_precision(
    detections: &[ScoredBox],
    truths: &[TruthBox],
    iou_thresh: f64,
) -> Option<f64> {
    if truths.is_empty() {
        return None;
    }
    let scores: Vec<f64> = detections.iter().map(|d| d.score).collect();
    let mut matched = vec![false; truths.len()];
    let is_tp: Vec<bool> = score_order(&scores)
        .into_iter()
        .map(|i| {
            let det = &detections[i];
            let mut best: Option<(f64, usize)> = None;
            for (g, t) in truths.iter().enumerate() {
                if matched[g] || t.image != det.image {
                    continue;
                }
                let v = iou(&det.bbox, &t.bbox);
                if v >= iou_thresh && best.is_none_or(|(b, _)| v > b) {
                    best = Some((v, g));
                }
            }
            match best {
                Some((_, g)) => {
                    matched[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    Some(envelope_ap(&is_tp, truths.len()))
}

/// Average precision of a ranking of items with binary relevance.
pub fn ranking_average_precision(scores: &[f64], relevant: &[bool]) -> Option<f64> {
    let positives = relevant.iter().filter(|&&r| r).count();
    if positives == 0 {
        return None;
    }
    let is_tp: Vec<bool> = score_order(scores)
        .into_iter()
        .map(|i| relevant[i])
        .collect();
    Some(envelope_ap(&is_tp, positives))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    /// Zero-shot detection, per unseen class.
    #[serde(rename = "ZSD")]
    Zsd,
    /// Zero-shot meta-class detection.
    #[serde(rename = "ZSMD")]
    Zsmd,
    /// Zero-shot tagging, image level.
    #[serde(rename = "ZST")]
    Zst,
    /// Zero-shot meta-class tagging.
    #[serde(rename = "ZSMT")]
    Zsmt,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Zsd, Task::Zsmd, Task::Zst, Task::Zsmt];

    pub fn name(self) -> &'static str {
        match self {
            Task::Zsd => "ZSD",
            Task::Zsmd => "ZSMD",
            Task::Zst => "ZST",
            Task::Zsmt => "ZSMT",
        }
    }

    pub fn parse(s: &str) -> Option<Task> {
        Task::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
    }

    fn is_meta(self) -> bool {
        matches!(self, Task::Zsmd | Task::Zsmt)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelAp {
    pub label: String,
    pub id: usize,
    pub ap: f64,
    pub num_positive: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: Task,
    pub rows: Vec<LabelAp>,
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub iou_thresh: f64,
    pub interpolation: String,
    pub tagging: String,
    pub tasks: Vec<TaskReport>,
}

impl DetectionReport {
    pub fn new(iou_thresh: f64, tasks: Vec<TaskReport>) -> Self {
        DetectionReport {
            iou_thresh,
            interpolation: "all-points precision envelope".into(),
            tagging: "image-level AP; an image is positive for a label iff it holds a ground truth of that label; score = max over proposals".into(),
            tasks,
        }
    }

    pub fn map(&self, task: Task) -> Option<f64> {
        self.tasks.iter().find(|t| t.task == task).map(|t| t.map)
    }
}

/// Relabeling target of a task: unseen class id or meta id, as `usize`.
fn task_label(task: Task, space: &LabelSpace, class: ClassId) -> Option<usize> {
    if !space.is_unseen(class) {
        return None;
    }
    if task.is_meta() {
        space.meta_of(class).map(|m| m.0)
    } else {
        Some(class.0)
    }
}

fn tag_slice(o: &ImageOutput, task: Task) -> &[f64] {
    if task.is_meta() {
        &o.meta_tags
    } else {
        &o.tags
    }
}

fn label_name(task: Task, space: &LabelSpace, id: usize) -> String {
    if task.is_meta() {
        space.meta_label(crate::MetaId(id)).into()
    } else {
        space.label(ClassId(id)).into()
    }
}

/// Scores one task over a test set. `outputs[i]` and `truths[i]` describe
/// the same image. Only unseen ground truths are evaluated; mAP is the
/// unweighted mean over labels with at least one positive.
pub fn evaluate(
    outputs: &[ImageOutput],
    truths: &[Vec<GroundTruth>],
    space: &LabelSpace,
    task: Task,
    iou_thresh: f64,
) -> Result<TaskReport> {
    if outputs.len() != truths.len() {
        return Err(Error::Report(alloc::format!(
            "{} outputs for {} images",
            outputs.len(),
            truths.len()
        )));
    }
    let mut labels: Vec<usize> = truths
        .iter()
        .flatten()
        .filter_map(|g| task_label(task, space, g.label))
        .collect();
    labels.sort_unstable();
    labels.dedup();

    let rows = match task {
        Task::Zsd | Task::Zsmd => {
            let mut dets: Vec<(usize, ScoredBox)> = Vec::new();
            for (image, out) in outputs.iter().enumerate() {
                for d in &out.detections {
                    let l = task_label(task, space, d.label).ok_or_else(|| {
                        Error::Report(alloc::format!(
                            "{task} expects unseen detections, got class {}",
                            d.label
                        ))
                    })?;
                    dets.push((
                        l,
                        ScoredBox {
                            image,
                            score: d.score,
                            bbox: d.bbox,
                        },
                    ));
                }
            }
            let mut gts: Vec<(usize, TruthBox)> = Vec::new();
            for (image, t) in truths.iter().enumerate() {
                for g in t {
                    if let Some(l) = task_label(task, space, g.label) {
                        gts.push((
                            l,
                            TruthBox {
                                image,
                                bbox: g.bbox,
                            },
                        ));
                    }
                }
            }
            labels
                .iter()
                .map(|&l| {
                    let d: Vec<ScoredBox> = dets.iter().filter(|x| x.0 == l).map(|x| x.1).collect();
                    let g: Vec<TruthBox> = gts.iter().filter(|x| x.0 == l).map(|x| x.1).collect();
                    LabelAp {
                        label: label_name(task, space, l),
                        id: l,
                        ap: average_precision(&d, &g, iou_thresh).unwrap_or(0.0),
                        num_positive: g.len(),
                    }
                })
                .collect::<Vec<_>>()
        }
        Task::Zst | Task::Zsmt => {
            let expected = if task.is_meta() {
                space.num_meta()
            } else {
                space.num_unseen()
            };
            if let Some(bad) = outputs
                .iter()
                .find(|o| tag_slice(o, task).len() != expected)
            {
                return Err(Error::Report(alloc::format!(
                    "image `{}` carries {} {task} scores, expected {expected}",
                    bad.image_id,
                    tag_slice(bad, task).len(),
                )));
            }
            labels
                .iter()
                .map(|&l| {
                    let slot = if task.is_meta() {
                        l - 1
                    } else {
                        l - space.num_seen() - 1
                    };
                    let scores: Vec<f64> =
                        outputs.iter().map(|o| tag_slice(o, task)[slot]).collect();
                    let relevant: Vec<bool> = truths
                        .iter()
                        .map(|t| {
                            t.iter()
                                .any(|g| task_label(task, space, g.label) == Some(l))
                        })
                        .collect();
                    LabelAp {
                        label: label_name(task, space, l),
                        id: l,
                        ap: ranking_average_precision(&scores, &relevant).unwrap_or(0.0),
                        num_positive: relevant.iter().filter(|&&r| r).count(),
                    }
                })
                .collect()
        }
    };
    if rows.is_empty() {
        return Err(Error::Report(alloc::format!(
            "no unseen ground truth for {task}"
        )));
    }
    let map = rows.iter().map(|r| r.ap).sum::<f64>() / rows.len() as f64;
    Ok(TaskReport { task, rows, map })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Top1 {
    /// Class-balanced mean accuracy.
    pub accuracy: f64,
    pub per_class: Vec<(ClassId, f64)>,
    /// Classes with no test image.
    pub excluded: Vec<ClassId>,
}

/// Mean over `classes` of per-class top-1 accuracy.
pub fn top1_accuracy(
    predictions: &[ClassId],
    gt_labels: &[ClassId],
    classes: impl IntoIterator<Item = ClassId>,
) -> Result<Top1> {
    if predictions.len() != gt_labels.len() {
        return Err(Error::Report(alloc::format!(
            "{} predictions for {} labels",
            predictions.len(),
            gt_labels.len()
        )));
    }
    let mut per_class = Vec::new();
    let mut excluded = Vec::new();
    for c in classes {
        let (mut n, mut hit) = (0usize, 0usize);
        for (p, g) in predictions.iter().zip(gt_labels) {
            if *g == c {
                n += 1;
                hit += usize::from(p == g);
            }
        }
        if n == 0 {
            excluded.push(c);
        } else {
            per_class.push((c, hit as f64 / n as f64));
        }
    }
    if per_class.is_empty() {
        return Err(Error::Report("no class has a test image".into()));
    }
    let accuracy = per_class.iter().map(|x| x.1).sum::<f64>() / per_class.len() as f64;
    Ok(Top1 {
        accuracy,
        per_class,
        excluded,
    })
}
