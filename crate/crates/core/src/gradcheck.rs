//! Finite-difference audit of the analytic loss gradients.
//!
//! Each trial draws a small random model and batch, computes the analytic
//! gradient with [`loss_gradients`], and compares every parameter against a
//! central difference of [`batch_loss`]. The relative error of one entry is
//! `|a - n| / max(|a|, |n|, floor)`.

use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bbox::Bbox;
use crate::linalg::Matrix;
use crate::loss::{batch_loss, loss_gradients, Gradients, LossMode};
use crate::semantics::{ClassId, EmbeddingTable, LabelSpace};
use crate::train::{LabeledRegion, TrainConfig};
use crate::{Model, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub trials: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub floor: f64,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub num_seen: usize,
    pub num_unseen: usize,
    pub num_meta: usize,
    pub batch: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            trials: 100,
            seed: 0,
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            feature_dim: 8,
            embed_dim: 8,
            num_seen: 5,
            num_unseen: 2,
            num_meta: 3,
            batch: 4,
        }
    }
}

/// The `(mode, λ)` settings cycled through by consecutive trials.
pub const SETTINGS: [(LossMode, f64); 6] = [
    (LossMode::Full, 0.0),
    (LossMode::Full, 0.6),
    (LossMode::Full, 1.0),
    (LossMode::SeenOnly, 0.0),
    (LossMode::SeenOnly, 0.6),
    (LossMode::SeenOnly, 1.0),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub mode: LossMode,
    pub lambda: f64,
    pub max_rel_err: f64,
    /// Parameter holding the worst entry, e.g. `w1[3,1]`.
    pub worst: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub trials: Vec<TrialResult>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// A random model, label space and batch.
pub struct Instance {
    pub model: Model,
    pub space: LabelSpace,
    pub batch: Vec<LabeledRegion>,
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn random_instance(cfg: &GradCheckConfig, seed: u64) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = cfg.num_seen + cfg.num_unseen;
    let labels: Vec<String> = (0..c).map(|i| alloc::format!("c{i}")).collect();
    let vectors = Matrix::from_fn(c, cfg.embed_dim, |_, _| normal(&mut rng));
    let table = EmbeddingTable::new(labels.clone(), vectors)?.finalize()?;
    let meta: Vec<(String, String)> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.clone(), alloc::format!("m{}", i % cfg.num_meta)))
        .collect();
    let space = LabelSpace::build(&labels[..cfg.num_seen], &labels[cfg.num_seen..], &meta)?;

    let mut model = Model::init(
        &TrainConfig::default(),
        &table,
        cfg.num_seen,
        cfg.feature_dim,
        rng.random(),
    )?;
    for x in model.box_weights_mut().as_mut_slice() {
        *x = 0.1 * normal(&mut rng);
    }
    for x in model.box_bias_mut() {
        *x = 0.1 * normal(&mut rng);
    }

    let batch = (0..cfg.batch)
        .map(|_| {
            let feature: Vec<f64> = (0..cfg.feature_dim).map(|_| normal(&mut rng)).collect();
            let x = rng.random_range(0.0..100.0);
            let y = rng.random_range(0.0..100.0);
            let proposal = Bbox::new(
                x,
                y,
                x + rng.random_range(10.0..60.0),
                y + rng.random_range(10.0..60.0),
            );
            let pick = rng.random_range(0..=cfg.num_seen);
            let label = if pick == cfg.num_seen {
                space.background()
            } else {
                ClassId(pick + 1)
            };
            let target = space.is_seen(label).then(|| {
                let mut j = || rng.random_range(-5.0..5.0);
                Bbox::new(
                    proposal.x1 + j(),
                    proposal.y1 + j(),
                    proposal.x2 + j(),
                    proposal.y2 + j(),
                )
            });
            LabeledRegion {
                feature,
                proposal,
                label,
                target,
            }
        })
        .collect();
    Ok(Instance {
        model,
        space,
        batch,
    })
}

fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

#[derive(Clone, Copy)]
enum Param {
    W1,
    BoxWeights,
    BoxBias,
}

fn param_slice(model: &mut Model, p: Param) -> &mut [f64] {
    match p {
        Param::W1 => model.w1_mut().as_mut_slice(),
        Param::BoxWeights => model.box_weights_mut().as_mut_slice(),
        Param::BoxBias => model.box_bias_mut(),
    }
}

fn param_name(model: &Model, p: Param, i: usize) -> String {
    match p {
        Param::W1 => {
            let d = model.embed_dim();
            alloc::format!("w1[{},{}]", i / d, i % d)
        }
        Param::BoxWeights => {
            let n = 4 * model.num_seen();
            alloc::format!("box_weights[{},{}]", i / n, i % n)
        }
        Param::BoxBias => alloc::format!("box_bias[{i}]"),
    }
}

/// Worst relative error between `grads` and central differences over
/// every parameter of `inst.model`.
pub fn compare(
    inst: &mut Instance,
    grads: &Gradients,
    mode: LossMode,
    lambda: f64,
    step: f64,
    floor: f64,
) -> Result<(f64, String)> {
    let mut worst = (0.0, String::new());
    for p in [Param::W1, Param::BoxWeights, Param::BoxBias] {
        let analytic: &[f64] = match p {
            Param::W1 => grads.w1.as_slice(),
            Param::BoxWeights => grads.box_weights.as_slice(),
            Param::BoxBias => &grads.box_bias,
        };
        for (i, &a) in analytic.iter().enumerate() {
            let original = param_slice(&mut inst.model, p)[i];
            param_slice(&mut inst.model, p)[i] = original + step;
            let up = total(inst, mode, lambda)?;
            param_slice(&mut inst.model, p)[i] = original - step;
            let down = total(inst, mode, lambda)?;
            param_slice(&mut inst.model, p)[i] = original;
            let e = rel_err(a, (up - down) / (2.0 * step), floor);
            if e > worst.0 || worst.1.is_empty() {
                worst = (e, param_name(&inst.model, p, i));
            }
        }
    }
    Ok(worst)
}

fn total(inst: &Instance, mode: LossMode, lambda: f64) -> Result<f64> {
    let refs: Vec<&LabeledRegion> = inst.batch.iter().collect();
    Ok(batch_loss(&inst.model, &refs, &inst.space, lambda, mode)?.total)
}

/// Runs the audit. `corrupt`, when given, is applied to every analytic
/// gradient before comparison.
pub fn run(
    cfg: &GradCheckConfig,
    corrupt: Option<&dyn Fn(&mut Gradients)>,
) -> Result<GradCheckReport> {
    let mut seeds = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trials = Vec::with_capacity(cfg.trials);
    for trial in 0..cfg.trials {
        let (mode, lambda) = SETTINGS[trial % SETTINGS.len()];
        let mut inst = random_instance(cfg, seeds.random())?;
        let refs: Vec<&LabeledRegion> = inst.batch.iter().collect();
        let (_, mut grads) = loss_gradients(&inst.model, &refs, &inst.space, lambda, mode)?;
        if let Some(f) = corrupt {
            f(&mut grads);
        }
        let (max_rel_err, worst) = compare(&mut inst, &grads, mode, lambda, cfg.step, cfg.floor)?;
        trials.push(TrialResult {
            trial,
            mode,
            lambda,
            max_rel_err,
            worst,
        });
    }
    let max_rel_err = trials.iter().map(|t| t.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_err < cfg.tolerance,
        max_rel_err,
        tolerance: cfg.tolerance,
        trials,
    })
}
