//! End-to-end glue shared by the command line and the test suites.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use zsd_core::data::Dataset;
use zsd_core::eval::{evaluate, top1_accuracy, DetectionReport, Task, Top1};
use zsd_core::infer::{ImageOutput, Inference};
use zsd_core::loss::LossBreakdown;
use zsd_core::train::{rebalance_dataset, train, TrainConfig};
use zsd_core::{ClassId, EmbeddingTable, LabelSpace, Model};

use crate::error::Result;
use crate::formats::{DatasetFile, SplitFile};

/// Class vectors ordered seen-first and finalized, with the matching label
/// space.
#[derive(Debug, Clone)]
pub struct Problem {
    pub table: EmbeddingTable,
    pub space: LabelSpace,
}

impl Problem {
    pub fn new(
        raw: &EmbeddingTable,
        meta_map: &[(String, String)],
        split: &SplitFile,
    ) -> Result<Problem> {
        let space = LabelSpace::build(&split.seen, &split.unseen, meta_map)?;
        let mut table = raw.select(space.class_labels())?;
        if !table.is_finalized() {
            table = table.finalize()?;
        }
        Ok(Problem { table, space })
    }
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub model: Model,
    pub history: Vec<LossBreakdown>,
    /// Unseen classes whose meta-class had no seen training image.
    pub unsupported: Vec<String>,
}

/// Fails if any training ground truth is an unseen class.
pub fn check_leakage(train_set: &Dataset, space: &LabelSpace) -> Result<()> {
    for im in &train_set.images {
        if let Some(g) = im.gts.iter().find(|g| !space.is_seen(g.label)) {
            return Err(zsd_core::Error::Config(format!(
                "training image `{}` holds non-seen class `{}`",
                im.id,
                space.label(g.label)
            ))
            .into());
        }
    }
    Ok(())
}

/// Relabels, rebalances (when `config.min_similar > 0`) and trains.
pub fn train_model(
    problem: &Problem,
    train_file: &DatasetFile,
    config: &TrainConfig,
) -> Result<TrainRun> {
    let space = &problem.space;
    let mut dataset = train_file.relabel(space)?;
    check_leakage(&dataset, space)?;
    let mut unsupported = Vec::new();
    if config.min_similar > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(2);
        let out = rebalance_dataset(&dataset, space, config.min_similar, &mut rng);
        dataset = out.dataset;
        unsupported = out
            .unsupported
            .iter()
            .map(|&c| space.label(c).to_string())
            .collect();
    }
    let out = train(&dataset, &problem.table, space, config)?;
    Ok(TrainRun {
        model: out.model,
        history: out.history,
        unsupported,
    })
}

/// Worker count from `ZSD_THREADS`, if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var("ZSD_THREADS")
        .ok()?
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
}

/// Runs inference on every test image, in parallel over images. Output
/// order follows `test.images`.
pub fn predict_all(
    model: &Model,
    space: &LabelSpace,
    test: &Dataset,
    inference: Inference,
    nms_iou: Option<f64>,
) -> Result<Vec<ImageOutput>> {
    let run = || {
        test.images
            .par_iter()
            .map(|im| inference.predict(model, space, im, nms_iou))
            .collect::<zsd_core::Result<Vec<_>>>()
    };
    let out = match thread_cap() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| zsd_core::Error::Config(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    };
    Ok(out?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub inference: Inference,
    pub nms_iou: Option<f64>,
    #[serde(flatten)]
    pub report: DetectionReport,
    /// Top-1 recognition over images holding exactly one unseen class.
    pub top1: Option<Top1>,
}

pub fn evaluate_outputs(
    outputs: &[ImageOutput],
    test: &Dataset,
    space: &LabelSpace,
    tasks: &[Task],
    iou_eval: f64,
) -> Result<DetectionReport> {
    let truths: Vec<_> = test.images.iter().map(|im| im.gts.clone()).collect();
    let reports = tasks
        .iter()
        .map(|&t| evaluate(outputs, &truths, space, t, iou_eval))
        .collect::<zsd_core::Result<Vec<_>>>()?;
    Ok(DetectionReport::new(iou_eval, reports))
}

/// Top-1 accuracy on the images whose ground truth names a single unseen
/// class. `None` when there are no such images.
pub fn top1_on(
    model: &Model,
    space: &LabelSpace,
    test: &Dataset,
    inference: Inference,
) -> Result<Option<Top1>> {
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for im in &test.images {
        let mut unseen: Vec<ClassId> = im
            .gts
            .iter()
            .map(|g| g.label)
            .filter(|&c| space.is_unseen(c))
            .collect();
        unseen.sort_unstable();
        unseen.dedup();
        if unseen.len() != 1 {
            continue;
        }
        preds.push(inference.top1(model, space, &im.proposals)?);
        gts.push(unseen[0]);
    }
    if gts.is_empty() {
        return Ok(None);
    }
    Ok(Some(top1_accuracy(&preds, &gts, space.unseen())?))
}

/// Full evaluation: inference, the requested tasks, and top-1.
pub fn evaluate_model(
    model: &Model,
    space: &LabelSpace,
    test: &Dataset,
    inference: Inference,
    nms_iou: Option<f64>,
    tasks: &[Task],
    iou_eval: f64,
) -> Result<EvalSummary> {
    let outputs = predict_all(model, space, test, inference, nms_iou)?;
    let report = evaluate_outputs(&outputs, test, space, tasks, iou_eval)?;
    Ok(EvalSummary {
        inference,
        nms_iou,
        report,
        top1: top1_on(model, space, test, inference)?,
    })
}

/// Aligned plain-text rendering of a summary.
pub fn render_table(summary: &EvalSummary) -> String {
    let report = &summary.report;
    let width = report
        .tasks
        .iter()
        .flat_map(|t| t.rows.iter().map(|r| r.label.len()))
        .chain([5])
        .max()
        .unwrap_or(5);
    let mut out = String::new();
    for t in &report.tasks {
        writeln!(
            out,
            "{:<5} {:>w$}  {:>6}  {:>4}",
            t.task.name(),
            "label",
            "AP",
            "n",
            w = width
        )
        .unwrap();
        for r in &t.rows {
            writeln!(
                out,
                "{:<5} {:>w$}  {:>6.4}  {:>4}",
                "",
                r.label,
                r.ap,
                r.num_positive,
                w = width
            )
            .unwrap();
        }
        writeln!(out, "{:<5} {:>w$}  {:>6.4}", "", "mAP", t.map, w = width).unwrap();
    }
    writeln!(out, "{:<5} {:>6}", "task", "mAP").unwrap();
    for t in &report.tasks {
        writeln!(out, "{:<5} {:>6.4}", t.task.name(), t.map).unwrap();
    }
    if let Some(top1) = &summary.top1 {
        writeln!(out, "{:<5} {:>6.4}", "top1", top1.accuracy).unwrap();
    }
    writeln!(
        out,
        "IoU {} | AP: {}",
        report.iou_thresh, report.interpolation
    )
    .unwrap();
    out
}
