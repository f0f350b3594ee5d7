use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use zsd::bundle::{self, load_problem};
use zsd::checkpoint::{load_checkpoint, save_checkpoint};
use zsd::formats::{
    format_detections, format_loss_csv, format_split, format_vectors, load_dataset, load_meta_map,
    write_text, SplitFile,
};
use zsd::manifest::RunManifest;
use zsd::pipeline::{evaluate_model, predict_all, render_table, train_model};
use zsd_core::data::{generate_synthetic, propose_split, SynthConfig};
use zsd_core::eval::Task;
use zsd_core::gradcheck::{self, GradCheckConfig};
use zsd_core::infer::{Inference, DEFAULT_K, DEFAULT_NMS_IOU};
use zsd_core::loss::LossMode;
use zsd_core::train::TrainConfig;

#[derive(Parser)]
#[command(
    name = "zsd",
    version,
    about = "Zero-shot object detection head on precomputed region features"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth(SynthArgs),
    /// Choose unseen classes from per-class instance counts.
    Split(SplitArgs),
    /// Train a model and write a checkpoint with its loss history.
    Train(TrainArgs),
    /// Write detections for a test set as JSON lines.
    Predict(PredictArgs),
    /// Score a checkpoint on the zero-shot tasks.
    Eval(EvalArgs),
    /// Compare analytic loss gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Write the modified embeddings `W1 v_c` of every class.
    ExportEmbeddings(ExportArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seen classes.
    #[arg(long, default_value_t = 20)]
    s: usize,
    /// Unseen classes.
    #[arg(long, default_value_t = 5)]
    u: usize,
    /// Meta-classes.
    #[arg(long, default_value_t = 5)]
    m: usize,
    /// Embedding dimension.
    #[arg(long, default_value_t = 16)]
    d: usize,
    /// Feature dimension.
    #[arg(long = "d-f", default_value_t = 16)]
    d_f: usize,
    #[arg(long, default_value_t = 200)]
    train_images: usize,
    #[arg(long, default_value_t = 50)]
    test_images: usize,
    #[arg(long, default_value_t = 12)]
    proposals: usize,
    #[arg(long, default_value_t = 3)]
    max_objects: usize,
    #[arg(long, default_value_t = 0.1)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 1.0)]
    meta_spread: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    /// Headerless CSV of `class,count`.
    #[arg(long)]
    counts: PathBuf,
    /// Headerless CSV of `class,meta`.
    #[arg(long)]
    meta: PathBuf,
    /// Meta-classes that contribute no unseen class.
    #[arg(long, value_delimiter = ',')]
    exclude: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Full,
    SeenOnly,
}

#[derive(Args)]
struct InputArgs {
    /// Directory holding embeddings.txt, meta.csv, split.txt and datasets.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    meta: Option<PathBuf>,
    #[arg(long)]
    split: Option<PathBuf>,
}

impl InputArgs {
    fn resolve(&self, explicit: &Option<PathBuf>, name: &str) -> anyhow::Result<PathBuf> {
        match (explicit, &self.data) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(dir)) => Ok(dir.join(name)),
            (None, None) => bail!("missing input `{name}`: pass --data or an explicit path"),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Training dataset (JSON lines).
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.8)]
    lambda: f64,
    #[arg(long, value_enum, default_value_t = ModeArg::Full)]
    mode: ModeArg,
    #[arg(long, default_value_t = 1e-5)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    epsilon: f64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    n_pos: usize,
    #[arg(long, default_value_t = 16)]
    n_neg: usize,
    #[arg(long, default_value_t = 200)]
    min_similar: usize,
    #[arg(long, default_value_t = 0.5)]
    fg_iou: f64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum InferenceArg {
    Direct,
    Conse,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Test dataset (JSON lines).
    #[arg(long)]
    test: PathBuf,
    #[arg(long, value_enum, default_value_t = InferenceArg::Direct)]
    inference: InferenceArg,
    /// Emission threshold; 0.2 for direct inference and 0.1 for ConSE when omitted.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    /// IoU above which per-class NMS suppresses a detection.
    #[arg(long, default_value_t = DEFAULT_NMS_IOU)]
    nms_iou: f64,
    #[arg(long)]
    no_nms: bool,
}

impl InferArgs {
    fn inference(&self) -> Inference {
        match self.inference {
            InferenceArg::Direct => Inference::Direct {
                alpha: self.alpha.unwrap_or(0.2),
            },
            InferenceArg::Conse => Inference::Conse {
                k: self.k,
                alpha: self.alpha.unwrap_or(0.1),
            },
        }
    }

    fn nms(&self) -> anyhow::Result<Option<f64>> {
        check_unit("--nms-iou", self.nms_iou)?;
        Ok((!self.no_nms).then_some(self.nms_iou))
    }
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    infer: InferArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    infer: InferArgs,
    /// `all` or a comma list of zsd, zsmd, zst, zsmt.
    #[arg(long, default_value = "all")]
    task: String,
    #[arg(long, default_value_t = 0.5)]
    iou_eval: f64,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Perturb the analytic gradient before comparing.
    #[arg(long, hide = true)]
    corrupt: bool,
    /// Optional output directory for the JSON report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Failures that map to exit code 1.
#[derive(Debug)]
struct VerificationFailed(String);

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for VerificationFailed {}

fn check_unit(flag: &str, v: f64) -> anyhow::Result<()> {
    if !(0.0..=1.0).contains(&v) {
        bail!("{flag} must lie in [0, 1], got {v}");
    }
    Ok(())
}

fn sidecar_manifest(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn write_sidecar(manifest: &RunManifest, out: &Path) -> anyhow::Result<()> {
    let path = sidecar_manifest(out);
    write_text(&path, &(serde_json::to_string_pretty(manifest)? + "\n"))?;
    Ok(())
}

fn synth(a: SynthArgs) -> anyhow::Result<()> {
    let cfg = SynthConfig {
        num_seen: a.s,
        num_unseen: a.u,
        num_meta: a.m,
        embed_dim: a.d,
        feature_dim: a.d_f,
        train_images: a.train_images,
        test_images: a.test_images,
        proposals_per_image: a.proposals,
        max_objects: a.max_objects,
        noise_sigma: a.noise_sigma,
        meta_spread: a.meta_spread,
        seed: a.seed,
    };
    let set = generate_synthetic(&cfg)?;
    let written = bundle::write_synthetic(&a.out, &set)?;
    RunManifest::new("synth", Some(a.seed), serde_json::to_value(&cfg)?)
        .outputs(&written)?
        .write(&a.out)?;
    println!("wrote {} files to {}", written.len(), a.out.display());
    Ok(())
}

fn split(a: SplitArgs) -> anyhow::Result<()> {
    let counts = load_meta_map(&a.counts)?
        .into_iter()
        .map(|(c, n)| {
            let n: usize = n
                .parse()
                .with_context(|| format!("count `{n}` of class `{c}`"))?;
            Ok((c, n))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let meta = load_meta_map(&a.meta)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let s = propose_split(&counts, &meta, &a.exclude, &mut rng)?;
    for m in &s.skipped_metas {
        eprintln!("warning: meta-class `{m}` contributes no unseen class");
    }
    write_text(
        &a.out,
        &format_split(&SplitFile {
            seen: s.seen.clone(),
            unseen: s.unseen.clone(),
        }),
    )?;
    let manifest = RunManifest::new("split", Some(a.seed), json!({ "exclude": a.exclude }))
        .input(&a.counts)?
        .input(&a.meta)?
        .outputs(std::slice::from_ref(&a.out))?;
    write_sidecar(&manifest, &a.out)?;
    println!("{} seen, {} unseen", s.seen.len(), s.unseen.len());
    Ok(())
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let paths = [
        a.input.resolve(&a.input.embeddings, bundle::EMBEDDINGS)?,
        a.input.resolve(&a.input.meta, bundle::META)?,
        a.input.resolve(&a.input.split, bundle::SPLIT)?,
        a.input.resolve(&a.train, bundle::TRAIN)?,
    ];
    let config = TrainConfig {
        lambda: a.lambda,
        mode: match a.mode {
            ModeArg::Full => LossMode::Full,
            ModeArg::SeenOnly => LossMode::SeenOnly,
        },
        lr: a.lr,
        beta1: a.beta1,
        beta2: a.beta2,
        epsilon: a.epsilon,
        n_pos: a.n_pos,
        n_neg: a.n_neg,
        epochs: a.epochs,
        seed: a.seed,
        min_similar: a.min_similar,
        fg_iou: a.fg_iou,
    };
    config.validate()?;
    let problem = load_problem(&paths[0], &paths[1], &paths[2])?;
    let train_file = load_dataset(&paths[3])?;
    let run = train_model(&problem, &train_file, &config)?;
    for u in &run.unsupported {
        eprintln!("warning: no seen training image shares the meta-class of unseen `{u}`");
    }
    let ck = a.out.join("checkpoint.json");
    let loss = a.out.join("loss.csv");
    save_checkpoint(&ck, &run.model, &problem.space)?;
    write_text(&loss, &format_loss_csv(&run.history))?;
    let mut manifest = RunManifest::new("train", Some(a.seed), serde_json::to_value(&config)?);
    for p in &paths {
        manifest = manifest.input(p)?;
    }
    manifest.outputs(&[ck.clone(), loss])?.write(&a.out)?;
    match run.history.last() {
        Some(h) => println!(
            "{} steps, final loss {:.6}; checkpoint {}",
            run.history.len(),
            h.total,
            ck.display()
        ),
        None => println!("0 steps; checkpoint {}", ck.display()),
    }
    Ok(())
}

fn load_eval_inputs(
    a: &InferArgs,
) -> anyhow::Result<(
    zsd_core::Model,
    zsd_core::LabelSpace,
    zsd_core::data::Dataset,
)> {
    let (model, space) = load_checkpoint(&a.checkpoint)?;
    let test = load_dataset(&a.test)?.relabel(&space)?;
    if test.feature_dim != model.feature_dim() {
        bail!(
            "test features have dimension {}, checkpoint expects {}",
            test.feature_dim,
            model.feature_dim()
        );
    }
    Ok((model, space, test))
}

fn infer_config(a: &InferArgs) -> serde_json::Value {
    json!({ "inference": a.inference(), "nms_iou": (!a.no_nms).then_some(a.nms_iou) })
}

fn predict(a: PredictArgs) -> anyhow::Result<()> {
    let nms = a.infer.nms()?;
    let (model, space, test) = load_eval_inputs(&a.infer)?;
    let outputs = predict_all(&model, &space, &test, a.infer.inference(), nms)?;
    let detections: Vec<_> = outputs.into_iter().flat_map(|o| o.detections).collect();
    write_text(&a.out, &format_detections(&detections, &space))?;
    let manifest = RunManifest::new("predict", None, infer_config(&a.infer))
        .input(&a.infer.checkpoint)?
        .input(&a.infer.test)?
        .outputs(std::slice::from_ref(&a.out))?;
    write_sidecar(&manifest, &a.out)?;
    println!(
        "{} detections written to {}",
        detections.len(),
        a.out.display()
    );
    Ok(())
}

fn parse_tasks(s: &str) -> anyhow::Result<Vec<Task>> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(Task::ALL.to_vec());
    }
    let mut tasks = s
        .split(',')
        .map(|t| Task::parse(t.trim()).with_context(|| format!("unknown task `{t}`")))
        .collect::<anyhow::Result<Vec<_>>>()?;
    tasks.sort();
    tasks.dedup();
    Ok(tasks)
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let tasks = parse_tasks(&a.task)?;
    check_unit("--iou-eval", a.iou_eval)?;
    let nms = a.infer.nms()?;
    let (model, space, test) = load_eval_inputs(&a.infer)?;
    let summary = evaluate_model(
        &model,
        &space,
        &test,
        a.infer.inference(),
        nms,
        &tasks,
        a.iou_eval,
    )?;
    let table = render_table(&summary);
    print!("{table}");
    if let Some(top1) = &summary.top1 {
        for c in &top1.excluded {
            eprintln!(
                "warning: unseen class `{}` has no single-class test image; excluded from top-1",
                space.label(*c)
            );
        }
    }
    if let Some(dir) = &a.out {
        let json_path = dir.join("report.json");
        let txt_path = dir.join("report.txt");
        write_text(
            &json_path,
            &(serde_json::to_string_pretty(&summary)? + "\n"),
        )?;
        write_text(&txt_path, &table)?;
        let mut config = infer_config(&a.infer);
        config["tasks"] = json!(tasks);
        config["iou_eval"] = json!(a.iou_eval);
        RunManifest::new("eval", None, config)
            .input(&a.infer.checkpoint)?
            .input(&a.infer.test)?
            .outputs(&[json_path, txt_path])?
            .write(dir)?;
    }
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> anyhow::Result<()> {
    let cfg = GradCheckConfig {
        trials: a.trials,
        seed: a.seed,
        ..GradCheckConfig::default()
    };
    let bump = |g: &mut zsd_core::loss::Gradients| {
        for x in g.w1.as_mut_slice() {
            *x = *x * 1.01 + 1e-3;
        }
    };
    let report = gradcheck::run(&cfg, if a.corrupt { Some(&bump) } else { None })?;
    if let Some(dir) = &a.out {
        let path = dir.join("gradcheck.json");
        write_text(&path, &(serde_json::to_string_pretty(&report)? + "\n"))?;
        RunManifest::new("gradcheck", Some(a.seed), serde_json::to_value(&cfg)?)
            .outputs(&[path])?
            .write(dir)?;
    }
    let worst = report
        .trials
        .iter()
        .max_by(|x, y| x.max_rel_err.total_cmp(&y.max_rel_err));
    println!(
        "{} trials, max relative error {:.3e} (tolerance {:.0e}){}",
        report.trials.len(),
        report.max_rel_err,
        report.tolerance,
        worst
            .map(|w| format!(", worst at trial {} {}", w.trial, w.worst))
            .unwrap_or_default()
    );
    if !report.passed {
        return Err(VerificationFailed("gradient check failed".into()).into());
    }
    println!("PASS");
    Ok(())
}

fn export(a: ExportArgs) -> anyhow::Result<()> {
    let (model, _) = load_checkpoint(&a.checkpoint)?;
    write_text(
        &a.out,
        &format_vectors(model.labels(), &model.modified_embeddings()),
    )?;
    let manifest = RunManifest::new("export-embeddings", None, json!({}))
        .input(&a.checkpoint)?
        .outputs(std::slice::from_ref(&a.out))?;
    write_sidecar(&manifest, &a.out)?;
    println!(
        "{} vectors written to {}",
        model.num_classes(),
        a.out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::ExportEmbeddings(a) => export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<VerificationFailed>() => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
