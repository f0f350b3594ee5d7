//! Test-time prediction over region proposals.
//!
//! Two inference rules are supported. `Direct` reads unseen scores straight
//! off the alignment layer of a fully trained model. `Conse` is the fallback
//! for models that never saw unseen vectors during training: each region is
//! mapped to a score-weighted sum of its top-K seen class vectors and
//! classified by cosine against the unseen vectors.
//!
//! Ties anywhere resolve to the lowest class id.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::bbox::Bbox;
use crate::data::{Image, Proposal};
use crate::eval::per_class_nms;
use crate::linalg::cosine;
use crate::semantics::{ClassId, LabelSpace, MetaId};
use crate::{Error, Model, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection<L = ClassId> {
    pub image_id: String,
    pub label: L,
    pub score: f64,
    pub bbox: Bbox,
}

/// Everything the evaluator needs for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageOutput {
    pub image_id: String,
    pub detections: Vec<Detection>,
    /// One score per unseen class, in id order.
    pub tags: Vec<f64>,
    /// One score per meta-class (background excluded), in id order.
    pub meta_tags: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TagMode {
    Class,
    Meta,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Inference {
    Direct { alpha: f64 },
    Conse { k: usize, alpha: f64 },
}

pub const DEFAULT_K: usize = 10;
pub const DEFAULT_NMS_IOU: f64 = 0.5;

fn check_space(model: &Model, space: &LabelSpace) -> Result<()> {
    if model.num_seen() != space.num_seen() || model.num_unseen() != space.num_unseen() {
        return Err(Error::Config(alloc::format!(
            "model has {}+{} classes, label space {}+{}",
            model.num_seen(),
            model.num_unseen(),
            space.num_seen(),
            space.num_unseen()
        )));
    }
    Ok(())
}

/// Normalized scores of one proposal; `None` for an all-zero feature.
fn region_scores(model: &Model, feature: &[f64]) -> Result<Option<Vec<f64>>> {
    let o = model.forward_scores(feature)?;
    match model.normalized_scores(&o, feature) {
        Ok(s) => Ok(Some(s)),
        Err(Error::ZeroFeature) => Ok(None),
        Err(e) => Err(e),
    }
}

/// First id with the strictly largest score among `ids`.
fn argmax(scores: &[f64], ids: impl Iterator<Item = ClassId>) -> Option<ClassId> {
    let mut best: Option<ClassId> = None;
    for id in ids {
        if best.is_none_or(|b| scores[id.index()] > scores[b.index()]) {
            best = Some(id);
        }
    }
    best
}

fn boxed(model: &Model, space: &LabelSpace, p: &Proposal, scores: &[f64]) -> Result<Bbox> {
    match argmax(scores, space.seen()) {
        Some(s) => Ok(p.bbox.decode(&model.box_delta(&p.feature, s)?)),
        None => Ok(p.bbox),
    }
}

/// Direct unseen detection with background rejection and threshold `alpha`.
pub fn detect(
    model: &Model,
    space: &LabelSpace,
    image_id: &str,
    proposals: &[Proposal],
    alpha: f64,
) -> Result<Vec<Detection>> {
    check_space(model, space)?;
    let mut out = Vec::new();
    for p in proposals {
        let Some(s) = region_scores(model, &p.feature)? else {
            continue;
        };
        if argmax(&s, space.all()) == Some(space.background()) {
            continue;
        }
        let Some(u) = argmax(&s, space.unseen()) else {
            continue;
        };
        if s[u.index()] > alpha {
            out.push(Detection {
                image_id: image_id.into(),
                label: u,
                score: s[u.index()],
                bbox: boxed(model, space, p, &s)?,
            });
        }
    }
    Ok(out)
}

/// `e = Σ_k ô_k v_k` over the `k` best seen classes. `scores` is indexed by
/// class; only the seen entries are read.
pub fn conse_project(model: &Model, scores: &[f64], k: usize) -> Result<Vec<f64>> {
    let s = model.num_seen();
    if k == 0 || k > s {
        return Err(Error::Config(alloc::format!("K = {k} outside 1..={s}")));
    }
    if scores.len() < s {
        return Err(Error::Shape {
            what: "seen score vector",
            expected: s,
            found: scores.len(),
        });
    }
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    let mut e = vec![0.0; model.embed_dim()];
    for &i in &order[..k] {
        let v = model.class_vectors().row(i);
        e.iter_mut()
            .zip(v)
            .for_each(|(acc, x)| *acc += scores[i] * x);
    }
    Ok(e)
}

/// Cosine of `e` against every unseen vector, in id order. `None` if `e` is zero.
fn unseen_cosines(model: &Model, space: &LabelSpace, e: &[f64]) -> Option<Vec<f64>> {
    space
        .unseen()
        .map(|u| cosine(e, model.class_vector(u)))
        .collect()
}

pub fn conse_detect(
    model: &Model,
    space: &LabelSpace,
    image_id: &str,
    proposals: &[Proposal],
    k: usize,
    alpha: f64,
) -> Result<Vec<Detection>> {
    check_space(model, space)?;
    let mut out = Vec::new();
    for p in proposals {
        let Some(s) = region_scores(model, &p.feature)? else {
            continue;
        };
        let kept = space.seen().chain(core::iter::once(space.background()));
        if argmax(&s, kept) == Some(space.background()) {
            continue;
        }
        let e = conse_project(model, &s, k)?;
        let Some(cos) = unseen_cosines(model, space, &e) else {
            continue;
        };
        let offset = space.num_seen() + 1;
        let Some(u) = argmax_slice(&cos).map(|i| ClassId(i + offset)) else {
            continue;
        };
        let score = cos[u.0 - offset];
        if score > alpha {
            out.push(Detection {
                image_id: image_id.into(),
                label: u,
                score,
                bbox: boxed(model, space, p, &s)?,
            });
        }
    }
    Ok(out)
}

fn argmax_slice(xs: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &x) in xs.iter().enumerate() {
        if best.is_none_or(|b| x > xs[b]) {
            best = Some(i);
        }
    }
    best
}

pub fn reduce_to_meta(
    detections: &[Detection],
    space: &LabelSpace,
) -> Result<Vec<Detection<MetaId>>> {
    detections
        .iter()
        .map(|d| {
            let meta = space
                .meta_of(d.label)
                .filter(|_| space.is_unseen(d.label))
                .ok_or_else(|| {
                    Error::Coverage(alloc::format!("class {} has no unseen meta-class", d.label))
                })?;
            Ok(Detection {
                image_id: d.image_id.clone(),
                label: meta,
                score: d.score,
                bbox: d.bbox,
            })
        })
        .collect()
}

/// Max of each unseen class's score over proposals, in id order.
fn class_tags(
    model: &Model,
    space: &LabelSpace,
    proposals: &[Proposal],
    per_region: impl Fn(&[f64]) -> Result<Option<Vec<f64>>>,
) -> Result<Vec<f64>> {
    check_space(model, space)?;
    let mut tags = vec![f64::NEG_INFINITY; space.num_unseen()];
    for p in proposals {
        let Some(s) = region_scores(model, &p.feature)? else {
            continue;
        };
        let Some(u) = per_region(&s)? else {
            continue;
        };
        tags.iter_mut().zip(u).for_each(|(t, x)| *t = t.max(x));
    }
    Ok(tags)
}

/// Meta-class scores from unseen class scores. Metas with no unseen member
/// score negative infinity.
pub fn meta_tags(class_tags: &[f64], space: &LabelSpace) -> Vec<f64> {
    let offset = space.num_seen() + 1;
    space
        .metas()
        .map(|m| {
            space
                .members(m)
                .iter()
                .filter(|c| space.is_unseen(**c))
                .map(|c| class_tags[c.0 - offset])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

fn finish_tags(tags: Vec<f64>, space: &LabelSpace, mode: TagMode) -> Vec<f64> {
    match mode {
        TagMode::Class => tags,
        TagMode::Meta => meta_tags(&tags, space),
    }
}

/// Image-level scores: per unseen label, the max over proposals of `ô`.
pub fn tag_image(
    model: &Model,
    space: &LabelSpace,
    proposals: &[Proposal],
    mode: TagMode,
) -> Result<Vec<f64>> {
    let lo = space.num_seen();
    let hi = lo + space.num_unseen();
    let tags = class_tags(model, space, proposals, |s| Ok(Some(s[lo..hi].to_vec())))?;
    Ok(finish_tags(tags, space, mode))
}

/// Image-level scores under the ConSE rule: per unseen label, the max over
/// proposals of `cos(e, v_u)`.
pub fn conse_tag_image(
    model: &Model,
    space: &LabelSpace,
    proposals: &[Proposal],
    k: usize,
    mode: TagMode,
) -> Result<Vec<f64>> {
    let tags = class_tags(model, space, proposals, |s| {
        let e = conse_project(model, s, k)?;
        Ok(unseen_cosines(model, space, &e))
    })?;
    Ok(finish_tags(tags, space, mode))
}

fn top1_from_tags(tags: &[f64], space: &LabelSpace) -> Result<ClassId> {
    if tags.iter().all(|t| *t == f64::NEG_INFINITY) {
        return Err(Error::Config("no usable proposal".into()));
    }
    argmax_slice(tags)
        .map(|i| ClassId(i + space.num_seen() + 1))
        .ok_or_else(|| Error::Config("no unseen class".into()))
}

/// The single unseen class with the highest score over all proposals.
pub fn recognize_top1(
    model: &Model,
    space: &LabelSpace,
    proposals: &[Proposal],
) -> Result<ClassId> {
    check_space(model, space)?;
    let mut best: Option<(f64, ClassId)> = None;
    for p in proposals {
        let Some(s) = region_scores(model, &p.feature)? else {
            continue;
        };
        for u in space.unseen() {
            let v = s[u.index()];
            let better = match best {
                None => true,
                Some((b, id)) => v > b || (v == b && u < id),
            };
            if better {
                best = Some((v, u));
            }
        }
    }
    best.map(|b| b.1)
        .ok_or_else(|| Error::Config("no usable proposal".into()))
}

impl Inference {
    pub fn alpha(&self) -> f64 {
        match *self {
            Inference::Direct { alpha } | Inference::Conse { alpha, .. } => alpha,
        }
    }

    pub fn detect(
        &self,
        model: &Model,
        space: &LabelSpace,
        image_id: &str,
        proposals: &[Proposal],
    ) -> Result<Vec<Detection>> {
        match *self {
            Inference::Direct { alpha } => detect(model, space, image_id, proposals, alpha),
            Inference::Conse { k, alpha } => {
                conse_detect(model, space, image_id, proposals, k, alpha)
            }
        }
    }

    pub fn tag(
        &self,
        model: &Model,
        space: &LabelSpace,
        proposals: &[Proposal],
        mode: TagMode,
    ) -> Result<Vec<f64>> {
        match *self {
            Inference::Direct { .. } => tag_image(model, space, proposals, mode),
            Inference::Conse { k, .. } => conse_tag_image(model, space, proposals, k, mode),
        }
    }

    pub fn top1(
        &self,
        model: &Model,
        space: &LabelSpace,
        proposals: &[Proposal],
    ) -> Result<ClassId> {
        match *self {
            Inference::Direct { .. } => recognize_top1(model, space, proposals),
            Inference::Conse { .. } => {
                top1_from_tags(&self.tag(model, space, proposals, TagMode::Class)?, space)
            }
        }
    }

    /// Detections (optionally NMS-filtered per class) plus both tag vectors.
    pub fn predict(
        &self,
        model: &Model,
        space: &LabelSpace,
        image: &Image,
        nms_iou: Option<f64>,
    ) -> Result<ImageOutput> {
        let mut detections = self.detect(model, space, &image.id, &image.proposals)?;
        if let Some(t) = nms_iou {
            detections = per_class_nms(&detections, t);
        }
        let tags = self.tag(model, space, &image.proposals, TagMode::Class)?;
        let meta_tags = meta_tags(&tags, space);
        Ok(ImageOutput {
            image_id: image.id.clone(),
            detections,
            tags,
            meta_tags,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::model::ModelParts;
    use crate::train::TrainConfig;
    use alloc::string::ToString;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// S seen + U unseen classes with one-hot class vectors in R^(S+U),
    /// identity W1, and background the mean of the class vectors.
    fn fixture(s: usize, u: usize) -> (Model, LabelSpace) {
        let c = s + u;
        let labels: Vec<String> = (0..c).map(|i| alloc::format!("c{i}")).collect();
        let mut vectors = Matrix::zeros(c + 1, c);
        for i in 0..c {
            vectors.set(i, i, 1.0);
            vectors.set(c, i, 1.0 / c as f64);
        }
        let model = Model::from_parts(ModelParts {
            labels: labels.clone(),
            num_seen: s,
            num_unseen: u,
            w1: Matrix::identity(c),
            class_vectors: vectors,
            box_weights: Matrix::zeros(c, 4 * s),
            box_bias: vec![0.0; 4 * s],
            config: TrainConfig::default(),
        })
        .unwrap();
        let meta: Vec<(String, String)> = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), alloc::format!("m{}", i % 2)))
            .collect();
        let space = LabelSpace::build(&labels[..s], &labels[s..], &meta).unwrap();
        (model, space)
    }

    fn prop(feature: Vec<f64>) -> Proposal {
        Proposal {
            feature,
            bbox: Bbox::new(0.0, 0.0, 10.0, 10.0),
        }
    }

    #[test]
    fn detect_picks_unseen_and_thresholds_strictly() {
        let (m, sp) = fixture(2, 2);
        // ô = f / ‖f‖ on the one-hot classes.
        let f = vec![0.6, 0.0, 0.8, 0.0];
        let d = detect(&m, &sp, "a", &[prop(f.clone())], 0.5).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].label, ClassId(3));
        assert_abs_diff_eq!(d[0].score, 0.8, epsilon = 1e-12);
        assert!(detect(&m, &sp, "a", &[prop(f)], 0.8).unwrap().is_empty());
    }

    #[test]
    fn detect_rejects_background() {
        let (m, sp) = fixture(2, 2);
        // Uniform feature: ô_bg = 1 beats every class at 0.5.
        let f = vec![1.0; 4];
        let s = region_scores(&m, &f).unwrap().unwrap();
        assert!(s[4] > s[0]);
        assert!(detect(&m, &sp, "a", &[prop(f)], -1.0).unwrap().is_empty());
    }

    #[test]
    fn detect_emits_even_when_seen_wins() {
        let (m, sp) = fixture(2, 2);
        let f = vec![0.9, 0.0, 0.3, 0.0];
        let d = detect(&m, &sp, "a", &[prop(f)], 0.1).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].label, ClassId(3));
    }

    #[test]
    fn zero_feature_is_skipped() {
        let (m, sp) = fixture(2, 2);
        assert!(detect(&m, &sp, "a", &[prop(vec![0.0; 4])], -1.0)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn conse_project_cases() {
        let (m, _) = fixture(3, 1);
        let e = conse_project(&m, &[0.2, 0.7, 0.1, 0.0, 0.0], 1).unwrap();
        assert_eq!(e, vec![0.0, 0.7, 0.0, 0.0]);
        let e = conse_project(&m, &[0.5, 0.5, 0.1, 0.0, 0.0], 2).unwrap();
        assert_eq!(e, vec![0.5, 0.5, 0.0, 0.0]);
        // Ties at the cut keep the lower class id.
        let e = conse_project(&m, &[0.5, 0.5, 0.5, 0.0, 0.0], 2).unwrap();
        assert_eq!(e, vec![0.5, 0.5, 0.0, 0.0]);
        assert!(matches!(
            conse_project(&m, &[0.0; 5], 4),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            conse_project(&m, &[0.0; 5], 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn conse_orthogonal_is_discarded() {
        let (m, sp) = fixture(2, 2);
        let d = conse_detect(&m, &sp, "a", &[prop(vec![1.0, 0.2, 0.0, 0.0])], 2, 0.1).unwrap();
        assert!(d.is_empty());
    }

    #[test]
    fn conse_parallel_wins_with_cosine_one() {
        // Seen vectors e1, e2; unseen vector along e1.
        let labels: Vec<String> = ["a", "b", "u"].iter().map(|s| s.to_string()).collect();
        let vectors = Matrix::from_vec(
            4,
            2,
            vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 2.0 / 3.0, 1.0 / 3.0],
        )
        .unwrap();
        let m = Model::from_parts(ModelParts {
            labels: labels.clone(),
            num_seen: 2,
            num_unseen: 1,
            w1: Matrix::identity(2),
            class_vectors: vectors,
            box_weights: Matrix::zeros(2, 8),
            box_bias: vec![0.0; 8],
            config: TrainConfig::default(),
        })
        .unwrap();
        let meta: Vec<(String, String)> = labels
            .iter()
            .map(|l| (l.clone(), "m".to_string()))
            .collect();
        let sp = LabelSpace::build(&labels[..2], &labels[2..], &meta).unwrap();
        let d = conse_detect(&m, &sp, "a", &[prop(vec![1.0, 0.0])], 1, 0.1).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].label, ClassId(3));
        assert_abs_diff_eq!(d[0].score, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn meta_reduction() {
        let (_, sp) = fixture(2, 2);
        let det = |label| Detection {
            image_id: "a".into(),
            label: ClassId(label),
            score: 0.5,
            bbox: Bbox::new(0.0, 0.0, 1.0, 1.0),
        };
        let r = reduce_to_meta(&[det(3), det(4)], &sp).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r[0].label, sp.meta_of(ClassId(3)).unwrap());
        assert_eq!(r[1].bbox, det(4).bbox);
        assert!(reduce_to_meta(&[], &sp).unwrap().is_empty());
        assert!(matches!(
            reduce_to_meta(&[det(1)], &sp),
            Err(Error::Coverage(_))
        ));
    }

    #[test]
    fn tags_single_and_pair() {
        let (m, sp) = fixture(2, 2);
        let p1 = prop(vec![0.0, 0.0, 0.6, 0.8]);
        let p2 = prop(vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(
            tag_image(&m, &sp, core::slice::from_ref(&p1), TagMode::Class).unwrap(),
            vec![0.6, 0.8]
        );
        let both = tag_image(&m, &sp, &[p1.clone(), p2.clone()], TagMode::Class).unwrap();
        assert_eq!(both, vec![1.0, 0.8]);
        let meta = tag_image(&m, &sp, &[p1, p2], TagMode::Meta).unwrap();
        // Classes alternate between m0 and m1: c2 → m0, c3 → m1.
        assert_eq!(meta, vec![1.0, 0.8]);
    }

    #[test]
    fn top1_ties_to_lowest_id() {
        let (m, sp) = fixture(2, 2);
        let p = prop(vec![0.0, 0.0, 1.0, 1.0]);
        assert_eq!(recognize_top1(&m, &sp, &[p]).unwrap(), ClassId(3));
    }

    fn random_model(seed: u64) -> (Model, LabelSpace, Vec<Proposal>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut m, sp) = fixture(4, 3);
        for r in 0..7 {
            for c in 0..7 {
                m.w1_mut().set(r, c, rng.random_range(-1.0..1.0));
            }
        }
        let props = (0..rng.random_range(1..6))
            .map(|_| prop((0..7).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        (m, sp, props)
    }

    #[test]
    fn tag_properties_on_random_instances() {
        for seed in 0..200 {
            let (m, sp, mut props) = random_model(seed);
            let tags = tag_image(&m, &sp, &props, TagMode::Class).unwrap();
            // Enumerate-proposals oracle.
            let mut oracle = vec![f64::NEG_INFINITY; 3];
            for p in &props {
                let s = region_scores(&m, &p.feature).unwrap().unwrap();
                for u in 0..3 {
                    oracle[u] = oracle[u].max(s[4 + u]);
                }
            }
            assert_eq!(tags, oracle);
            let top = recognize_top1(&m, &sp, &props).unwrap();
            assert_eq!(top, top1_from_tags(&tags, &sp).unwrap());
            props.reverse();
            assert_eq!(tag_image(&m, &sp, &props, TagMode::Class).unwrap(), tags);

            let alpha = 0.05;
            for d in detect(&m, &sp, "x", &props, alpha).unwrap() {
                assert!(d.score > alpha && d.bbox.is_well_ordered());
                assert!(sp.is_unseen(d.label));
            }
            for d in conse_detect(&m, &sp, "x", &props, 2, -1.0).unwrap() {
                assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&d.score));
            }
        }
    }

    #[test]
    fn predict_bundles_outputs() {
        let (m, sp) = fixture(2, 2);
        let image = Image {
            id: "img".into(),
            proposals: vec![
                prop(vec![0.0, 0.0, 1.0, 0.0]),
                prop(vec![0.0, 0.0, 1.0, 0.01]),
            ],
            gts: Vec::new(),
        };
        let out = Inference::Direct { alpha: 0.2 }
            .predict(&m, &sp, &image, Some(0.5))
            .unwrap();
        assert_eq!(out.detections.len(), 1);
        assert_eq!(out.tags.len(), 2);
        assert_eq!(out.meta_tags.len(), sp.num_meta());
        let raw = Inference::Direct { alpha: 0.2 }
            .predict(&m, &sp, &image, None)
            .unwrap();
        assert_eq!(raw.detections.len(), 2);
    }
}
