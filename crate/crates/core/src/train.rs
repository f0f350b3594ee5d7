//! Adam training of `W1` and the box head over per-image mini-batches.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::Bbox;
use crate::data::{Dataset, GroundTruth, Proposal};
use crate::eval::iou;
use crate::loss::{loss_gradients, LossBreakdown, LossMode};
use crate::model::Model;
use crate::semantics::{ClassId, EmbeddingTable, LabelSpace, MetaId};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub mode: LossMode,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub epochs: usize,
    pub seed: u64,
    pub min_similar: usize,
    pub fg_iou: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.8,
            mode: LossMode::Full,
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            n_pos: 16,
            n_neg: 16,
            epochs: 10,
            seed: 0,
            min_similar: 200,
            fg_iou: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: alloc::string::String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("learning rate {} must be positive", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return fail(format!("{name} {b} outside (0, 1)"));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return fail(format!("epsilon {} must be positive", self.epsilon));
        }
        if !(0.0..=1.0).contains(&self.fg_iou) {
            return fail(format!("fg_iou {} outside [0, 1]", self.fg_iou));
        }
        if self.n_pos + self.n_neg == 0 {
            return fail("batch size n_pos + n_neg must be positive".into());
        }
        Ok(())
    }
}

/// Adam moment accumulators for one parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape {
            what: "adam parameters",
            expected: params.len(),
            found: grads.len(),
        });
    }
    if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NumericFailure { index });
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - libm::pow(config.beta1, t as f64);
    let c2 = 1.0 - libm::pow(config.beta2, t as f64);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = config.beta1 * *m + (1.0 - config.beta1) * g;
        *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= config.lr * m_hat / (libm::sqrt(v_hat) + config.epsilon);
    }
    Ok(())
}

/// A proposal with its training label, and the matched ground-truth box
/// for foreground proposals.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRegion {
    pub feature: Vec<f64>,
    pub proposal: Bbox,
    pub label: ClassId,
    pub target: Option<Bbox>,
}

/// Assigns each proposal the class of its highest-IoU ground truth when
/// that IoU is at least `fg_iou`, background otherwise. On equal IoU the
/// earlier ground truth wins.
pub fn label_proposals(
    proposals: &[Proposal],
    gts: &[GroundTruth],
    background: ClassId,
    fg_iou: f64,
) -> Vec<LabeledRegion> {
    proposals
        .iter()
        .map(|p| {
            let mut best: Option<(f64, &GroundTruth)> = None;
            for gt in gts {
                let v = iou(&p.bbox, &gt.bbox);
                if best.is_none_or(|(b, _)| v > b) {
                    best = Some((v, gt));
                }
            }
            let (label, target) = match best {
                Some((v, gt)) if v >= fg_iou => (gt.label, Some(gt.bbox)),
                _ => (background, None),
            };
            LabeledRegion {
                feature: p.feature.clone(),
                proposal: p.bbox,
                label,
                target,
            }
        })
        .collect()
}

fn draw<R: Rng>(pool: &[usize], n: usize, rng: &mut R, out: &mut Vec<usize>) {
    if pool.is_empty() || n == 0 {
        return;
    }
    if pool.len() >= n {
        out.extend(
            index::sample(rng, pool.len(), n)
                .into_iter()
                .map(|i| pool[i]),
        );
    } else {
        // Short pool: every member once, the rest drawn with replacement.
        out.extend_from_slice(pool);
        for _ in pool.len()..n {
            out.push(pool[rng.random_range(0..pool.len())]);
        }
    }
}

/// Up to `n_pos` foreground then up to `n_neg` background sample indices.
/// `None` when the image has no proposals.
pub fn compose_batch<R: Rng>(
    samples: &[LabeledRegion],
    background: ClassId,
    n_pos: usize,
    n_neg: usize,
    rng: &mut R,
) -> Option<Vec<usize>> {
    if samples.is_empty() {
        return None;
    }
    let (fg, bg): (Vec<usize>, Vec<usize>) =
        (0..samples.len()).partition(|&i| samples[i].label != background);
    let mut out = Vec::with_capacity(n_pos + n_neg);
    draw(&fg, n_pos, rng, &mut out);
    draw(&bg, n_neg, rng, &mut out);
    if out.is_empty() {
        None
    } else {
        Some(out)
    }
}

#[derive(Debug, Clone)]
pub struct RebalanceOutcome {
    pub dataset: Dataset,
    /// Unseen classes whose meta-class has no seen training instances.
    pub unsupported: Vec<ClassId>,
}

/// Balances training images so that each unseen class's meta-class is
/// represented by `min_similar` images containing a seen member of it.
///
/// Images are the unit of repetition, since each image is one mini-batch.
/// A meta pool larger than `min_similar` is subsampled uniformly; a smaller
/// pool keeps every image and is topped up by uniform repetition. Images
/// outside every pool are kept once. `min_similar = 0` leaves the dataset
/// unchanged.
pub fn rebalance_dataset<R: Rng>(
    dataset: &Dataset,
    space: &LabelSpace,
    min_similar: usize,
    rng: &mut R,
) -> RebalanceOutcome {
    let mut metas: Vec<MetaId> = space.unseen().filter_map(|u| space.meta_of(u)).collect();
    metas.sort_unstable();
    metas.dedup();

    let mut unsupported = Vec::new();
    let mut pools: Vec<Vec<usize>> = Vec::with_capacity(metas.len());
    for &m in &metas {
        let pool: Vec<usize> = dataset
            .images
            .iter()
            .enumerate()
            .filter(|(_, im)| {
                im.gts
                    .iter()
                    .any(|g| space.is_seen(g.label) && space.meta_of(g.label) == Some(m))
            })
            .map(|(i, _)| i)
            .collect();
        if pool.is_empty() {
            unsupported.extend(space.unseen().filter(|&u| space.meta_of(u) == Some(m)));
        }
        pools.push(pool);
    }

    if min_similar == 0 {
        return RebalanceOutcome {
            dataset: dataset.clone(),
            unsupported,
        };
    }

    let mut pooled = vec![false; dataset.images.len()];
    for &i in pools.iter().flatten() {
        pooled[i] = true;
    }
    let mut order: Vec<usize> = (0..dataset.images.len()).filter(|&i| !pooled[i]).collect();
    for pool in &pools {
        if pool.is_empty() {
            continue;
        }
        if pool.len() >= min_similar {
            let mut picked: Vec<usize> = index::sample(rng, pool.len(), min_similar)
                .into_iter()
                .map(|k| pool[k])
                .collect();
            picked.sort_unstable();
            order.extend(picked);
        } else {
            order.extend_from_slice(pool);
            for _ in pool.len()..min_similar {
                order.push(pool[rng.random_range(0..pool.len())]);
            }
        }
    }
    RebalanceOutcome {
        dataset: Dataset {
            feature_dim: dataset.feature_dim,
            images: order
                .into_iter()
                .map(|i| dataset.images[i].clone())
                .collect(),
        },
        unsupported,
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<LossBreakdown>,
}

/// Trains from a fresh [`Model::init`] (seeded by `config.seed`). Each epoch
/// visits every image once in shuffled order and takes one Adam step on a
/// mini-batch drawn from that image.
pub fn train(
    dataset: &Dataset,
    table: &EmbeddingTable,
    space: &LabelSpace,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if table.labels() != space.class_labels() {
        return Err(Error::Config(
            "embedding table order does not match the label space".into(),
        ));
    }
    let mut model = Model::init(
        config,
        table,
        space.num_seen(),
        dataset.feature_dim,
        config.seed,
    )?;
    let w2_before = model.class_vectors().clone();

    let background = space.background();
    let labeled: Vec<Vec<LabeledRegion>> = dataset
        .images
        .iter()
        .map(|im| label_proposals(&im.proposals, &im.gts, background, config.fg_iou))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut adam_w1 = AdamState::new(model.w1().as_slice().len());
    let mut adam_box = AdamState::new(model.box_weights().as_slice().len());
    let mut adam_bias = AdamState::new(model.box_bias().len());
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..labeled.len()).collect();

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let samples = &labeled[i];
            let Some(ids) =
                compose_batch(samples, background, config.n_pos, config.n_neg, &mut rng)
            else {
                continue;
            };
            let batch: Vec<&LabeledRegion> = ids.iter().map(|&k| &samples[k]).collect();
            let step = history.len();
            let (loss, grads) = loss_gradients(&model, &batch, space, config.lambda, config.mode)
                .map_err(|e| match e {
                Error::NumericFailure { .. } => Error::NumericFailure { index: step },
                other => other,
            })?;
            let numeric = |_| Error::NumericFailure { index: step };
            adam_step(
                model.w1_mut().as_mut_slice(),
                grads.w1.as_slice(),
                &mut adam_w1,
                config,
            )
            .map_err(numeric)?;
            let (bw, bb) = model.box_params_mut();
            adam_step(
                bw.as_mut_slice(),
                grads.box_weights.as_slice(),
                &mut adam_box,
                config,
            )
            .map_err(numeric)?;
            adam_step(bb, &grads.box_bias, &mut adam_bias, config).map_err(numeric)?;
            history.push(loss);
        }
    }
    debug_assert_eq!(&w2_before, model.class_vectors());
    Ok(TrainOutcome { model, history })
}
