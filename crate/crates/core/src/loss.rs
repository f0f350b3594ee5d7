//! Classification and box-regression losses with analytic gradients.
//!
//! All score-space losses are averages of `softplus(o_c - o_j)` terms:
//!
//! - `L_mm` pairs the target `y` against every other label;
//! - `L_mc` pairs each member `j` of the target's meta-class against every
//!   label `c` outside it (background included, as its own singleton);
//! - `L_cls = λ L_mm + (1 - λ) L_mc`.
//!
//! In [`LossMode::SeenOnly`] both sums are restricted to seen labels plus
//! background, so unseen score entries are never read.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::bbox::Bbox;
use crate::linalg::Matrix;
use crate::model::Model;
use crate::semantics::{ClassId, LabelSpace};
use crate::train::LabeledRegion;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Scores of every class, unseen included, take part in the losses.
    #[default]
    Full,
    /// Only seen classes and background.
    SeenOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_mm: f64,
    pub l_mc: f64,
    pub l_cls: f64,
    pub l_reg: f64,
    pub total: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Matrix,
    pub box_weights: Matrix,
    pub box_bias: Vec<f64>,
}

/// `log(1 + e^x)` without overflow in either tail.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + libm::log1p(libm::exp(-x.abs()))
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Smooth-L1 with the transition at 1.
#[inline]
pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

#[inline]
fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

fn in_universe(space: &LabelSpace, mode: LossMode, c: ClassId) -> bool {
    match mode {
        LossMode::Full => space.contains(c),
        LossMode::SeenOnly => space.is_seen(c) || space.is_background(c),
    }
}

fn universe(space: &LabelSpace, mode: LossMode) -> impl Iterator<Item = ClassId> + '_ {
    space.all().filter(move |&c| in_universe(space, mode, c))
}

fn check_inputs(o: &[f64], y: ClassId, space: &LabelSpace) -> Result<()> {
    if o.len() != space.num_classes() + 1 {
        return Err(Error::Shape {
            what: "score vector",
            expected: space.num_classes() + 1,
            found: o.len(),
        });
    }
    if !(space.is_seen(y) || space.is_background(y)) {
        return Err(Error::InvalidTarget(y));
    }
    Ok(())
}

/// Mean of `softplus(o_c - o_y)` over every other label in the mode's
/// universe. When `grad` is given, adds `scale · ∂L/∂o` into it.
fn margin_term(
    o: &[f64],
    y: ClassId,
    space: &LabelSpace,
    mode: LossMode,
    mut grad: Option<(&mut [f64], f64)>,
) -> f64 {
    let others: Vec<ClassId> = universe(space, mode).filter(|&c| c != y).collect();
    let n = others.len();
    if n == 0 {
        return 0.0;
    }
    let inv = 1.0 / n as f64;
    let oy = o[y.index()];
    let mut loss = 0.0;
    for c in others {
        let diff = o[c.index()] - oy;
        loss += softplus(diff);
        if let Some((g, scale)) = grad.as_mut() {
            let s = *scale * inv * sigmoid(diff);
            g[c.index()] += s;
            g[y.index()] -= s;
        }
    }
    loss * inv
}

fn cluster_term(
    o: &[f64],
    y: ClassId,
    space: &LabelSpace,
    mode: LossMode,
    mut grad: Option<(&mut [f64], f64)>,
) -> f64 {
    let meta = space
        .meta_of(y)
        .expect("target validated against label space");
    let inside: Vec<ClassId> = space
        .members(meta)
        .iter()
        .copied()
        .filter(|&c| in_universe(space, mode, c))
        .collect();
    let outside: Vec<ClassId> = universe(space, mode)
        .filter(|c| !inside.contains(c))
        .collect();
    if inside.is_empty() || outside.is_empty() {
        return 0.0;
    }
    let inv = 1.0 / (inside.len() * outside.len()) as f64;
    let mut loss = 0.0;
    for &c in &outside {
        for &j in &inside {
            let diff = o[c.index()] - o[j.index()];
            loss += softplus(diff);
            if let Some((g, scale)) = grad.as_mut() {
                let s = *scale * inv * sigmoid(diff);
                g[c.index()] += s;
                g[j.index()] -= s;
            }
        }
    }
    loss * inv
}

/// `L_mm` in full mode, `L'_mm` in seen-only mode.
pub fn max_margin_loss(o: &[f64], y: ClassId, space: &LabelSpace, mode: LossMode) -> Result<f64> {
    check_inputs(o, y, space)?;
    Ok(margin_term(o, y, space, mode, None))
}

/// `L_mc`: pulls the members of the target's meta-class above every label
/// outside it.
pub fn clustering_loss(o: &[f64], y: ClassId, space: &LabelSpace, mode: LossMode) -> Result<f64> {
    check_inputs(o, y, space)?;
    Ok(cluster_term(o, y, space, mode, None))
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(alloc::format!(
            "lambda {lambda} outside [0, 1]"
        )));
    }
    Ok(())
}

/// `λ L_mm + (1 - λ) L_mc`. The regression fields are left at zero.
pub fn classification_loss(
    o: &[f64],
    y: ClassId,
    space: &LabelSpace,
    lambda: f64,
    mode: LossMode,
) -> Result<LossBreakdown> {
    check_lambda(lambda)?;
    check_inputs(o, y, space)?;
    let l_mm = margin_term(o, y, space, mode, None);
    let l_mc = cluster_term(o, y, space, mode, None);
    let l_cls = lambda * l_mm + (1.0 - lambda) * l_mc;
    Ok(LossBreakdown {
        l_mm,
        l_mc,
        l_cls,
        l_reg: 0.0,
        total: l_cls,
        lambda,
    })
}

/// Smooth-L1 between class `y`'s slice of `pred` (the `4 S` box-head
/// outputs) and the offsets from `proposal` to `gt`. Zero unless `y` is seen.
pub fn regression_loss(
    pred: &[f64],
    proposal: &Bbox,
    gt: &Bbox,
    y: ClassId,
    space: &LabelSpace,
) -> f64 {
    if !space.is_seen(y) {
        return 0.0;
    }
    let target = proposal.encode(gt).to_array();
    let base = 4 * y.index();
    pred[base..base + 4]
        .iter()
        .zip(target)
        .map(|(p, t)| smooth_l1(p - t))
        .sum()
}

fn regression_target(sample: &LabeledRegion, space: &LabelSpace) -> Option<Bbox> {
    if space.is_seen(sample.label) {
        sample.target
    } else {
        None
    }
}

/// Batch loss by forward evaluation only: `L_cls` averaged over all samples,
/// `L_reg` averaged over samples that carry a regression target.
pub fn batch_loss(
    model: &Model,
    batch: &[&LabeledRegion],
    space: &LabelSpace,
    lambda: f64,
    mode: LossMode,
) -> Result<LossBreakdown> {
    check_lambda(lambda)?;
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let mut acc = LossBreakdown {
        lambda,
        ..LossBreakdown::default()
    };
    let mut positives = 0usize;
    for sample in batch {
        let o = model.forward_scores(&sample.feature)?;
        let part = classification_loss(&o, sample.label, space, lambda, mode)?;
        acc.l_mm += part.l_mm;
        acc.l_mc += part.l_mc;
        acc.l_cls += part.l_cls;
        if let Some(gt) = regression_target(sample, space) {
            let pred = model.box_outputs(&sample.feature)?;
            acc.l_reg += regression_loss(&pred, &sample.proposal, &gt, sample.label, space);
            positives += 1;
        }
    }
    Ok(finish(acc, batch.len(), positives))
}

fn finish(mut acc: LossBreakdown, n: usize, positives: usize) -> LossBreakdown {
    let inv = 1.0 / n as f64;
    acc.l_mm *= inv;
    acc.l_mc *= inv;
    acc.l_cls *= inv;
    if positives > 0 {
        acc.l_reg /= positives as f64;
    }
    acc.total = acc.l_cls + acc.l_reg;
    acc
}

/// Batch loss and its exact gradient with respect to `W1` and the box head.
///
/// With `g_i = ∂L_i/∂o_i`, the projection gradient is
/// `dW1 = (1/N) Σ_i f_i (W2 g_i)ᵀ`.
pub fn loss_gradients(
    model: &Model,
    batch: &[&LabeledRegion],
    space: &LabelSpace,
    lambda: f64,
    mode: LossMode,
) -> Result<(LossBreakdown, Gradients)> {
    check_lambda(lambda)?;
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let w2 = model.class_vectors();
    let (df, d, nbox) = (model.feature_dim(), model.embed_dim(), 4 * model.num_seen());
    let mut grads = Gradients {
        w1: Matrix::zeros(df, d),
        box_weights: Matrix::zeros(df, nbox),
        box_bias: vec![0.0; nbox],
    };
    let mut acc = LossBreakdown {
        lambda,
        ..LossBreakdown::default()
    };

    let positives = batch
        .iter()
        .filter(|s| regression_target(s, space).is_some())
        .count();
    let inv_n = 1.0 / batch.len() as f64;
    let inv_pos = if positives > 0 {
        1.0 / positives as f64
    } else {
        0.0
    };
    let mut dscore = vec![0.0; space.num_classes() + 1];

    for (index, sample) in batch.iter().enumerate() {
        let o = model.forward_scores(&sample.feature)?;
        check_inputs(&o, sample.label, space)?;
        dscore.iter_mut().for_each(|g| *g = 0.0);
        let l_mm = margin_term(&o, sample.label, space, mode, Some((&mut dscore, lambda)));
        let l_mc = cluster_term(
            &o,
            sample.label,
            space,
            mode,
            Some((&mut dscore, 1.0 - lambda)),
        );
        acc.l_mm += l_mm;
        acc.l_mc += l_mc;
        acc.l_cls += lambda * l_mm + (1.0 - lambda) * l_mc;

        let semantic = w2.transpose_mul_vec(&dscore);
        if !semantic.iter().all(|x| x.is_finite()) {
            return Err(Error::NumericFailure { index });
        }
        grads.w1.add_outer(inv_n, &sample.feature, &semantic);

        if let Some(gt) = regression_target(sample, space) {
            let pred = model.box_outputs(&sample.feature)?;
            acc.l_reg += regression_loss(&pred, &sample.proposal, &gt, sample.label, space);
            let target = sample.proposal.encode(&gt).to_array();
            let base = 4 * sample.label.index();
            for k in 0..4 {
                let g = smooth_l1_grad(pred[base + k] - target[k]) * inv_pos;
                if !g.is_finite() {
                    return Err(Error::NumericFailure { index });
                }
                grads.box_bias[base + k] += g;
                for (r, f) in sample.feature.iter().enumerate() {
                    let cur = grads.box_weights.get(r, base + k);
                    grads.box_weights.set(r, base + k, cur + f * g);
                }
            }
        }
    }
    if !grads.w1.is_finite() || !grads.box_weights.is_finite() {
        return Err(Error::NumericFailure {
            index: batch.len() - 1,
        });
    }
    Ok((finish(acc, batch.len(), positives), grads))
}
