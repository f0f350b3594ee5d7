//! Acceptance suite. Runs every criterion at its fixed tolerance and prints
//! one PASS/FAIL line per criterion; exits non-zero if any fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zsd::checkpoint::Checkpoint;
use zsd::formats::{DatasetFile, SplitFile};
use zsd::pipeline::{check_leakage, evaluate_outputs, predict_all, train_model, Problem};
use zsd_core::data::{generate_synthetic, SynthConfig, SyntheticSet};
use zsd_core::eval::{
    average_precision, iou, nms_indices, per_class_nms, DetectionReport, ScoredBox, Task, TruthBox,
};
use zsd_core::gradcheck::{random_instance, GradCheckConfig};
use zsd_core::infer::{meta_tags, Detection, ImageOutput, Inference};
use zsd_core::linalg::cosine;
use zsd_core::loss::{batch_loss, classification_loss, loss_gradients, LossMode};
use zsd_core::train::{LabeledRegion, TrainConfig};
use zsd_core::{Bbox, ClassId, LabelSpace, Model};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- 1

fn gradient_fidelity() -> Outcome {
    const STEP: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    const FLOOR: f64 = 1e-6;
    let cfg = GradCheckConfig::default();
    let settings = [0.0, 0.6, 1.0]
        .into_iter()
        .flat_map(|l| [(LossMode::Full, l), (LossMode::SeenOnly, l)])
        .collect::<Vec<_>>();
    let mut worst = 0.0f64;
    let mut entries = 0usize;
    for trial in 0..100u64 {
        let (mode, lambda) = settings[trial as usize % settings.len()];
        let mut inst = random_instance(&cfg, 1000 + trial).expect("instance");
        let batch: Vec<LabeledRegion> = inst.batch.clone();
        let refs: Vec<&LabeledRegion> = batch.iter().collect();
        let (_, grads) =
            loss_gradients(&inst.model, &refs, &inst.space, lambda, mode).expect("gradients");
        let loss = |m: &Model| {
            batch_loss(m, &refs, &inst.space, lambda, mode)
                .expect("loss")
                .total
        };

        let mut check = |analytic: f64, up: f64, down: f64| {
            let numeric = (up - down) / (2.0 * STEP);
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(err);
            entries += 1;
        };
        let (rows, cols) = (inst.model.w1().rows(), inst.model.w1().cols());
        for r in 0..rows {
            for c in 0..cols {
                let x = inst.model.w1().get(r, c);
                inst.model.w1_mut().set(r, c, x + STEP);
                let up = loss(&inst.model);
                inst.model.w1_mut().set(r, c, x - STEP);
                let down = loss(&inst.model);
                inst.model.w1_mut().set(r, c, x);
                check(grads.w1.get(r, c), up, down);
            }
        }
        let (rows, cols) = (
            inst.model.box_weights().rows(),
            inst.model.box_weights().cols(),
        );
        for r in 0..rows {
            for c in 0..cols {
                let x = inst.model.box_weights().get(r, c);
                inst.model.box_weights_mut().set(r, c, x + STEP);
                let up = loss(&inst.model);
                inst.model.box_weights_mut().set(r, c, x - STEP);
                let down = loss(&inst.model);
                inst.model.box_weights_mut().set(r, c, x);
                check(grads.box_weights.get(r, c), up, down);
            }
        }
        for i in 0..inst.model.box_bias().len() {
            let x = inst.model.box_bias()[i];
            inst.model.box_bias_mut()[i] = x + STEP;
            let up = loss(&inst.model);
            inst.model.box_bias_mut()[i] = x - STEP;
            let down = loss(&inst.model);
            inst.model.box_bias_mut()[i] = x;
            check(grads.box_bias[i], up, down);
        }
    }
    outcome(
        worst < TOL,
        format!("max relative error {worst:.2e} < {TOL:.0e} over {entries} entries, 100 instances"),
    )
}

// ---------------------------------------------------------------- 2

fn naive_nms(boxes: &[Bbox], scores: &[f64], thresh: f64) -> Vec<usize> {
    let mut alive: Vec<usize> = (0..boxes.len()).collect();
    let mut keep = Vec::new();
    while let Some(&first) = alive.first() {
        let best = alive.iter().copied().fold(first, |b, i| {
            if scores[i] > scores[b] || (scores[i] == scores[b] && i < b) {
                i
            } else {
                b
            }
        });
        keep.push(best);
        alive.retain(|&i| i != best && iou(&boxes[i], &boxes[best]) <= thresh);
    }
    keep
}

/// Rematches every prefix of the ranking from scratch and integrates the
/// precision envelope over the distinct recall levels.
fn brute_ap(dets: &[ScoredBox], gts: &[TruthBox], thresh: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut curve = Vec::new();
    for k in 1..=order.len() {
        let mut taken = vec![false; gts.len()];
        let mut tp = 0usize;
        for &i in &order[..k] {
            let candidates = (0..gts.len()).filter(|&g| !taken[g] && gts[g].image == dets[i].image);
            let best = candidates
                .map(|g| (iou(&dets[i].bbox, &gts[g].bbox), g))
                .filter(|&(v, _)| v >= thresh)
                .fold(None, |acc: Option<(f64, usize)>, x| match acc {
                    Some(a) if a.0 >= x.0 => Some(a),
                    _ => Some(x),
                });
            if let Some((_, g)) = best {
                taken[g] = true;
                tp += 1;
            }
        }
        curve.push((tp as f64 / gts.len() as f64, tp as f64 / k as f64));
    }
    let mut levels: Vec<f64> = curve.iter().map(|c| c.0).filter(|&r| r > 0.0).collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let mut prev = 0.0;
    let mut ap = 0.0;
    for r in levels {
        let p = curve
            .iter()
            .filter(|c| c.0 >= r)
            .map(|c| c.1)
            .fold(0.0, f64::max);
        ap += (r - prev) * p;
        prev = r;
    }
    Some(ap)
}

fn random_box(rng: &mut ChaCha8Rng) -> Bbox {
    let x = rng.random_range(0.0..30.0);
    let y = rng.random_range(0.0..30.0);
    Bbox::new(
        x,
        y,
        x + rng.random_range(1.0..15.0),
        y + rng.random_range(1.0..15.0),
    )
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_ap = 0.0f64;
    let mut nms_mismatch = 0usize;
    let mut undefined_mismatch = 0usize;
    for _ in 0..500 {
        let ng = rng.random_range(0..=4);
        let gts: Vec<TruthBox> = (0..ng)
            .map(|_| TruthBox {
                image: rng.random_range(0..2),
                bbox: random_box(&mut rng),
            })
            .collect();
        let nd = rng.random_range(0..=6);
        let dets: Vec<ScoredBox> = (0..nd)
            .map(|_| {
                let bbox = match gts.len() {
                    n if n > 0 && rng.random_bool(0.5) => {
                        let g = gts[rng.random_range(0..n)].bbox;
                        let s = rng.random_range(-2.0..2.0);
                        Bbox::new(g.x1 + s, g.y1, g.x2 + s, g.y2)
                    }
                    _ => random_box(&mut rng),
                };
                ScoredBox {
                    image: rng.random_range(0..2),
                    score: rng.random_range(0..4) as f64 * 0.25,
                    bbox,
                }
            })
            .collect();
        match (
            average_precision(&dets, &gts, 0.5),
            brute_ap(&dets, &gts, 0.5),
        ) {
            (Some(a), Some(b)) => worst_ap = worst_ap.max((a - b).abs()),
            (None, None) => {}
            _ => undefined_mismatch += 1,
        }
        let boxes: Vec<Bbox> = dets.iter().map(|d| d.bbox).collect();
        let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
        let mut fast = nms_indices(&boxes, &scores, 0.5);
        let mut slow = naive_nms(&boxes, &scores, 0.5);
        fast.sort_unstable();
        slow.sort_unstable();
        nms_mismatch += usize::from(fast != slow);
    }
    outcome(
        worst_ap <= 1e-9 && nms_mismatch == 0 && undefined_mismatch == 0,
        format!("500 cases: max |AP - oracle| {worst_ap:.1e} (<= 1e-9), NMS membership mismatches {nms_mismatch}, undefined-AP mismatches {undefined_mismatch}"),
    )
}

// ---------------------------------------------------------------- 3

fn small_space() -> LabelSpace {
    let labels: Vec<String> = (0..9).map(|i| format!("k{i}")).collect();
    let meta: Vec<(String, String)> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.clone(), format!("g{}", i % 3)))
        .collect();
    LabelSpace::build(&labels[..6], &labels[6..], &meta).expect("space")
}

fn loss_identities() -> Outcome {
    let space = small_space();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let targets: Vec<ClassId> = space.seen().chain([space.background()]).collect();
    let mut worst = 0.0f64;
    let mut invariance_breaks = 0usize;
    let ln2 = std::f64::consts::LN_2;
    for _ in 0..1000 {
        let o: Vec<f64> = (0..=space.num_classes())
            .map(|_| rng.random_range(-5.0..5.0))
            .collect();
        let y = targets[rng.random_range(0..targets.len())];
        for mode in [LossMode::Full, LossMode::SeenOnly] {
            let one = classification_loss(&o, y, &space, 1.0, mode).unwrap();
            let zero = classification_loss(&o, y, &space, 0.0, mode).unwrap();
            worst = worst
                .max((one.l_cls - one.l_mm).abs())
                .max((zero.l_cls - zero.l_mc).abs());
            let c = rng.random_range(-50.0..50.0);
            let flat = classification_loss(&vec![c; o.len()], y, &space, 0.5, mode).unwrap();
            worst = worst
                .max((flat.l_mm - ln2).abs())
                .max((flat.l_mc - ln2).abs());
        }
        let mut perturbed = o.clone();
        for u in space.unseen() {
            perturbed[u.index()] = rng.random_range(-1e6..1e6);
        }
        for lambda in [0.0, 0.6, 1.0] {
            let a = classification_loss(&o, y, &space, lambda, LossMode::SeenOnly).unwrap();
            let b = classification_loss(&perturbed, y, &space, lambda, LossMode::SeenOnly).unwrap();
            invariance_breaks += usize::from(a != b);
        }
    }
    outcome(
        worst <= 1e-12 && invariance_breaks == 0,
        format!("max identity deviation {worst:.1e} (<= 1e-12), seen-only invariance breaks {invariance_breaks}/3000"),
    )
}

// ---------------------------------------------------------------- 4-7

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const TASKS: [Task; 4] = [Task::Zsd, Task::Zsmd, Task::Zst, Task::Zsmt];
const NMS_IOU: Option<f64> = Some(0.5);
const IOU_EVAL: f64 = 0.5;

/// Desk-scale optimizer setting shared by every trained method.
fn train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 1e-2,
        epochs: 20,
        min_similar: 0,
        seed,
        ..TrainConfig::default()
    }
}

struct SeedRun {
    cluster: DetectionReport,
    margin_conse: DetectionReport,
    baseline: DetectionReport,
    chance: DetectionReport,
    cluster_gap: f64,
    margin_only_gap: f64,
    checkpoints: Vec<String>,
}

fn problem_of(set: &SyntheticSet) -> (Problem, DatasetFile) {
    let split = SplitFile {
        seen: set.seen.clone(),
        unseen: set.unseen.clone(),
    };
    let problem = Problem::new(&set.table, &set.meta_map, &split).expect("problem");
    let file = DatasetFile {
        labels: set.table.labels().to_vec(),
        dataset: set.train.clone(),
    };
    (problem, file)
}

fn report(
    model: &Model,
    space: &LabelSpace,
    set: &SyntheticSet,
    inference: Inference,
) -> DetectionReport {
    let outputs = predict_all(model, space, &set.test, inference, NMS_IOU).expect("predict");
    evaluate_outputs(&outputs, &set.test, space, &TASKS, IOU_EVAL).expect("evaluate")
}

/// Uniformly random unseen label and score for every proposal, box kept.
fn chance_report(space: &LabelSpace, set: &SyntheticSet, seed: u64) -> DetectionReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(9);
    let first_unseen = space.num_seen() + 1;
    let outputs: Vec<ImageOutput> = set
        .test
        .images
        .iter()
        .map(|im| {
            let detections: Vec<Detection> = im
                .proposals
                .iter()
                .map(|p| Detection {
                    image_id: im.id.clone(),
                    label: ClassId(first_unseen + rng.random_range(0..space.num_unseen())),
                    score: rng.random(),
                    bbox: p.bbox,
                })
                .collect();
            let tags: Vec<f64> = (0..space.num_unseen()).map(|_| rng.random()).collect();
            ImageOutput {
                image_id: im.id.clone(),
                detections: per_class_nms(&detections, NMS_IOU.unwrap()),
                meta_tags: meta_tags(&tags, space),
                tags,
            }
        })
        .collect();
    evaluate_outputs(&outputs, &set.test, space, &TASKS, IOU_EVAL).expect("evaluate")
}

/// Mean intra-meta minus mean inter-meta cosine of the exported `W1 v_c`.
fn embedding_gap(model: &Model, space: &LabelSpace) -> f64 {
    let e = model.modified_embeddings();
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0usize, 0.0, 0usize);
    let classes: Vec<ClassId> = space.seen().chain(space.unseen()).collect();
    for (i, &a) in classes.iter().enumerate() {
        for &b in &classes[i + 1..] {
            let c = cosine(e.row(a.index()), e.row(b.index())).expect("nonzero embedding");
            if space.meta_of(a) == space.meta_of(b) {
                intra += c;
                ni += 1;
            } else {
                inter += c;
                nx += 1;
            }
        }
    }
    intra / ni as f64 - inter / nx as f64
}

fn run_seed(seed: u64) -> SeedRun {
    let set = generate_synthetic(&SynthConfig {
        seed,
        ..SynthConfig::default()
    })
    .expect("synthetic set");
    let (problem, file) = problem_of(&set);
    let space = &problem.space;
    let base = train_config(seed);

    let cluster = train_model(
        &problem,
        &file,
        &TrainConfig {
            lambda: 0.8,
            ..base.clone()
        },
    )
    .expect("cluster");
    let margin = train_model(
        &problem,
        &file,
        &TrainConfig {
            lambda: 1.0,
            mode: LossMode::SeenOnly,
            ..base.clone()
        },
    )
    .expect("seen-only margin");
    let margin_full = train_model(
        &problem,
        &file,
        &TrainConfig {
            lambda: 1.0,
            ..base.clone()
        },
    )
    .expect("margin");
    let untrained = Model::init(
        &base,
        &problem.table,
        space.num_seen(),
        set.train.feature_dim,
        seed,
    )
    .expect("init");

    let conse = Inference::Conse { k: 10, alpha: 0.1 };
    SeedRun {
        cluster: report(
            &cluster.model,
            space,
            &set,
            Inference::Direct { alpha: 0.2 },
        ),
        margin_conse: report(&margin.model, space, &set, conse),
        baseline: report(&untrained, space, &set, conse),
        chance: chance_report(space, &set, seed),
        cluster_gap: embedding_gap(&cluster.model, space),
        margin_only_gap: embedding_gap(&margin_full.model, space),
        checkpoints: [&cluster.model, &margin.model, &margin_full.model]
            .iter()
            .map(|m| Checkpoint::new(m, space).to_json())
            .collect(),
    }
}

fn mean(runs: &[SeedRun], f: impl Fn(&SeedRun) -> f64) -> f64 {
    runs.iter().map(f).sum::<f64>() / runs.len() as f64
}

fn zsd(r: &DetectionReport) -> f64 {
    r.map(Task::Zsd).expect("ZSD row")
}

fn ordering(runs: &[SeedRun], elapsed: Duration) -> Outcome {
    let cluster = mean(runs, |r| zsd(&r.cluster));
    let margin = mean(runs, |r| zsd(&r.margin_conse));
    let baseline = mean(runs, |r| zsd(&r.baseline));
    let chance = mean(runs, |r| zsd(&r.chance));
    let passed = cluster - margin >= -0.01
        && margin - baseline >= -0.01
        && cluster >= 3.0 * chance
        && elapsed < Duration::from_secs(300);
    outcome(
        passed,
        format!(
            "ZSD mAP over 5 seeds: cluster {cluster:.4} >= L'mm+ConSE {margin:.4} >= baseline {baseline:.4} (margin -0.01); chance {chance:.4}, cluster/chance {:.1} (>= 3); {:.1} s (< 300 s)",
            cluster / chance,
            elapsed.as_secs_f64()
        ),
    )
}

fn separation(runs: &[SeedRun]) -> Outcome {
    let cluster = mean(runs, |r| r.cluster_gap);
    let margin = mean(runs, |r| r.margin_only_gap);
    outcome(
        cluster > 0.0 && margin < cluster,
        format!("intra - inter meta cosine: cluster {cluster:.4} (> 0), lambda=1 {margin:.4} (< cluster)"),
    )
}

fn relaxation(runs: &[SeedRun]) -> Outcome {
    let mut violations = Vec::new();
    for (seed, r) in SEEDS.iter().zip(runs) {
        for (name, rep) in [
            ("cluster", &r.cluster),
            ("L'mm+ConSE", &r.margin_conse),
            ("baseline", &r.baseline),
        ] {
            let (zst, zsmt) = (rep.map(Task::Zst).unwrap(), rep.map(Task::Zsmt).unwrap());
            if zsmt < zst {
                violations.push(format!("{name}@{seed}: {zsmt:.4} < {zst:.4}"));
            }
        }
    }
    let m = |f: fn(&SeedRun) -> &DetectionReport, t| mean(runs, |r| f(r).map(t).unwrap());
    outcome(
        violations.is_empty(),
        format!(
            "ZST -> ZSMT: cluster {:.4} -> {:.4}, L'mm+ConSE {:.4} -> {:.4}, baseline {:.4} -> {:.4}; violations {:?}",
            m(|r| &r.cluster, Task::Zst),
            m(|r| &r.cluster, Task::Zsmt),
            m(|r| &r.margin_conse, Task::Zst),
            m(|r| &r.margin_conse, Task::Zsmt),
            m(|r| &r.baseline, Task::Zst),
            m(|r| &r.baseline, Task::Zsmt),
            violations
        ),
    )
}

fn determinism(first: &[SeedRun], second: &[SeedRun]) -> Outcome {
    let mut worst = 0.0f64;
    let mut compared = 0usize;
    let mut ck_diff = 0usize;
    for (a, b) in first.iter().zip(second) {
        for (ra, rb) in [
            (&a.cluster, &b.cluster),
            (&a.margin_conse, &b.margin_conse),
            (&a.baseline, &b.baseline),
            (&a.chance, &b.chance),
        ] {
            for t in TASKS {
                worst = worst.max((ra.map(t).unwrap() - rb.map(t).unwrap()).abs());
                compared += 1;
            }
        }
        ck_diff += a
            .checkpoints
            .iter()
            .zip(&b.checkpoints)
            .filter(|(x, y)| x.as_bytes() != y.as_bytes())
            .count();
    }
    outcome(
        worst <= 1e-12 && ck_diff == 0,
        format!(
            "{compared} mAPs max |diff| {worst:.1e} (<= 1e-12); differing checkpoints {ck_diff}/15"
        ),
    )
}

// ---------------------------------------------------------------- 8

fn leakage() -> Outcome {
    let mut leaked = 0usize;
    let mut test_without_unseen = 0usize;
    let mut images = 0usize;
    let mut guard_errors = 0usize;
    for seed in 0..20 {
        let set = generate_synthetic(&SynthConfig {
            seed,
            ..SynthConfig::default()
        })
        .expect("synthetic set");
        let (problem, file) = problem_of(&set);
        let train = file.relabel(&problem.space).expect("relabel");
        leaked += train
            .images
            .iter()
            .flat_map(|im| &im.gts)
            .filter(|g| !problem.space.is_seen(g.label))
            .count();
        guard_errors += usize::from(check_leakage(&train, &problem.space).is_err());
        images += train.images.len();
        test_without_unseen += set
            .test
            .images
            .iter()
            .filter(|im| !im.gts.iter().any(|g| problem.space.is_unseen(g.label)))
            .count();
    }
    outcome(
        leaked == 0 && guard_errors == 0 && test_without_unseen == 0,
        format!("20 generated sets, {images} train images: unseen train gts {leaked}, guard rejections {guard_errors}, test images without unseen {test_without_unseen}"),
    )
}

fn main() {
    std::env::set_var("ZSD_THREADS", "1");
    let mut results: Vec<(usize, &str, Outcome, Duration)> = Vec::new();
    let mut timed = |id: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        let dt = t.elapsed();
        println!(
            "[{}] criterion {id} {name}: {} ({:.2} s)",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail,
            dt.as_secs_f64()
        );
        results.push((id, name, o, dt));
    };

    timed(1, "gradient fidelity", &mut gradient_fidelity);
    timed(2, "metric oracle equivalence", &mut metric_oracles);
    timed(3, "loss identities", &mut loss_identities);

    let t = Instant::now();
    let first: Vec<SeedRun> = SEEDS.iter().map(|&s| run_seed(s)).collect();
    let first_elapsed = t.elapsed();
    timed(4, "synthetic end-to-end ordering", &mut || {
        ordering(&first, first_elapsed)
    });
    timed(5, "embedding separation", &mut || separation(&first));
    timed(6, "task-relaxation consistency", &mut || relaxation(&first));
    timed(7, "determinism", &mut || {
        let second: Vec<SeedRun> = SEEDS.iter().map(|&s| run_seed(s)).collect();
        determinism(&first, &second)
    });
    timed(8, "leakage guard", &mut leakage);

    let failed: Vec<_> = results
        .iter()
        .filter(|r| !r.2.passed)
        .map(|r| r.0)
        .collect();
    println!(
        "acceptance: {}/{} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
