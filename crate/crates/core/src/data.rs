//! Datasets of precomputed region features, the seen/unseen split protocol,
//! and a synthetic generator standing in for a convolutional backbone.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bbox::Bbox;
use crate::linalg::{norm, Matrix};
use crate::semantics::{ClassId, EmbeddingTable};
use crate::{Error, Result};

/// One region proposal: its pooled feature and box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub feature: Vec<f64>,
    pub bbox: Bbox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub label: ClassId,
    pub bbox: Bbox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub id: String,
    pub proposals: Vec<Proposal>,
    pub gts: Vec<GroundTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub feature_dim: usize,
    pub images: Vec<Image>,
}

impl Dataset {
    /// Ground-truth instances per class id, indexed by `ClassId::index`.
    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for gt in self.images.iter().flat_map(|im| &im.gts) {
            if let Some(c) = counts.get_mut(gt.label.index()) {
                *c += 1;
            }
        }
        counts
    }

    pub fn num_proposals(&self) -> usize {
        self.images.iter().map(|im| im.proposals.len()).sum()
    }

    /// Checks feature lengths and box ordering.
    pub fn validate(&self) -> Result<()> {
        for im in &self.images {
            for p in &im.proposals {
                if p.feature.len() != self.feature_dim {
                    return Err(Error::Shape {
                        what: "proposal feature",
                        expected: self.feature_dim,
                        found: p.feature.len(),
                    });
                }
                if !p.feature.iter().all(|x| x.is_finite()) {
                    return Err(Error::Config(format!(
                        "non-finite feature in image `{}`",
                        im.id
                    )));
                }
                if !p.bbox.is_well_ordered() {
                    return Err(Error::Config(format!(
                        "malformed proposal box in image `{}`",
                        im.id
                    )));
                }
            }
            if im.gts.iter().any(|g| !g.bbox.is_well_ordered()) {
                return Err(Error::Config(format!(
                    "malformed ground-truth box in image `{}`",
                    im.id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_seen: usize,
    pub num_unseen: usize,
    pub num_meta: usize,
    pub embed_dim: usize,
    pub feature_dim: usize,
    pub train_images: usize,
    pub test_images: usize,
    pub proposals_per_image: usize,
    pub max_objects: usize,
    pub noise_sigma: f64,
    /// Within-meta dispersion of class vectors, relative to the unit centroid.
    pub meta_spread: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_seen: 20,
            num_unseen: 5,
            num_meta: 5,
            embed_dim: 16,
            feature_dim: 16,
            train_images: 200,
            test_images: 50,
            proposals_per_image: 12,
            max_objects: 3,
            noise_sigma: 0.1,
            meta_spread: 1.0,
            seed: 0,
        }
    }
}

const IMAGE_SIZE: f64 = 256.0;
const GRID: usize = 4;
const PROPOSALS_PER_OBJECT: usize = 2;
/// Each corner moves by at most this fraction of the cell size.
const CORNER_JITTER: f64 = 0.1;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.num_seen == 0 {
            return fail("need at least one seen class");
        }
        if self.num_unseen == 0 {
            return fail("need at least one unseen class");
        }
        if self.num_meta == 0 || self.num_meta > self.num_seen + self.num_unseen {
            return fail("meta-class count must be in 1..=S+U");
        }
        if self.embed_dim == 0 || self.feature_dim == 0 {
            return fail("dimensions must be positive");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail("noise_sigma must be a finite non-negative number");
        }
        if !(self.meta_spread >= 0.0 && self.meta_spread.is_finite()) {
            return fail("meta_spread must be a finite non-negative number");
        }
        if self.max_objects == 0 || self.max_objects >= GRID * GRID {
            return fail("max_objects must be in 1..16");
        }
        if self.proposals_per_image <= PROPOSALS_PER_OBJECT * self.max_objects {
            return fail("proposals_per_image must exceed 2 x max_objects");
        }
        Ok(())
    }
}

/// Latent quantities of a synthetic draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRecord {
    pub seed: u64,
    /// `G` (`d_f × d`): positive features are `G v_y + noise`.
    pub feature_map: Matrix,
    pub centroids: Matrix,
    /// Meta-class index (0-based) of each class, seen first.
    pub class_meta: Vec<usize>,
    pub background_scale: f64,
    pub seen: Vec<String>,
    pub unseen: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SyntheticSet {
    /// Unit-norm class vectors, seen first.
    pub table: EmbeddingTable,
    pub meta_map: Vec<(String, String)>,
    pub seen: Vec<String>,
    pub unseen: Vec<String>,
    pub train: Dataset,
    pub test: Dataset,
    pub oracle: OracleRecord,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn cell_box(cell: usize) -> Bbox {
    let size = IMAGE_SIZE / GRID as f64;
    let (r, c) = (cell / GRID, cell % GRID);
    Bbox::new(
        c as f64 * size,
        r as f64 * size,
        (c + 1) as f64 * size,
        (r + 1) as f64 * size,
    )
}

fn jitter(rng: &mut ChaCha8Rng, b: &Bbox) -> Bbox {
    let size = IMAGE_SIZE / GRID as f64;
    let mut j = || rng.random_range(-CORNER_JITTER..=CORNER_JITTER) * size;
    Bbox::new(b.x1 + j(), b.y1 + j(), b.x2 + j(), b.y2 + j())
}

struct Generator<'a> {
    config: &'a SynthConfig,
    rng: ChaCha8Rng,
    feature_map: Matrix,
    class_vectors: Matrix,
    background_scale: f64,
}

impl Generator<'_> {
    fn positive_feature(&mut self, class: ClassId) -> Vec<f64> {
        let mut f = self
            .feature_map
            .mul_vec(self.class_vectors.row(class.index()));
        let sigma = self.config.noise_sigma;
        for x in f.iter_mut() {
            *x += sigma * self.rng.sample::<f64, _>(StandardNormal);
        }
        f
    }

    fn background_feature(&mut self) -> Vec<f64> {
        let scale = self.background_scale;
        gaussian_vec(&mut self.rng, self.config.feature_dim)
            .into_iter()
            .map(|x| scale * x)
            .collect()
    }

    /// `first` is drawn for the first object, `rest` for the others.
    fn image(&mut self, id: String, first: &[ClassId], rest: &[ClassId]) -> Image {
        let n_obj = self.rng.random_range(1..=self.config.max_objects);
        let cells = index::sample(&mut self.rng, GRID * GRID, GRID * GRID).into_vec();
        let mut proposals = Vec::with_capacity(self.config.proposals_per_image);
        let mut gts = Vec::with_capacity(n_obj);
        for (k, &cell) in cells.iter().take(n_obj).enumerate() {
            let pool = if k == 0 { first } else { rest };
            let label = pool[self.rng.random_range(0..pool.len())];
            let bbox = cell_box(cell);
            gts.push(GroundTruth { label, bbox });
            for _ in 0..PROPOSALS_PER_OBJECT {
                let feature = self.positive_feature(label);
                let pbox = jitter(&mut self.rng, &bbox);
                proposals.push(Proposal {
                    feature,
                    bbox: pbox,
                });
            }
        }
        let empty = &cells[n_obj..];
        while proposals.len() < self.config.proposals_per_image {
            let cell = empty[self.rng.random_range(0..empty.len())];
            let bbox = jitter(&mut self.rng, &cell_box(cell));
            let feature = self.background_feature();
            proposals.push(Proposal { feature, bbox });
        }
        let order = index::sample(&mut self.rng, proposals.len(), proposals.len());
        let proposals = order.into_iter().map(|i| proposals[i].clone()).collect();
        Image { id, proposals, gts }
    }
}

/// Draws a labeled world with known structure:
///
/// - `M` meta centroids uniform on the unit sphere; each class vector is
///   its centroid plus `meta_spread` relative Gaussian dispersion,
///   renormalized. Classes are dealt to metas round-robin, seen and unseen
///   separately, so unseen classes spread over the metas.
/// - A feature map `G` with `N(0, 1/d)` entries; a positive proposal of
///   class `y` has feature `G v_y + noise_sigma · N(0, I)`; a background
///   proposal is isotropic Gaussian scaled to the RMS norm of `G v_c`.
/// - Images on a 4×4 grid of 64-px cells. Objects fill random cells (the
///   cell is the ground-truth box) and get two proposals with corners
///   jittered by up to 10% of the cell size; background proposals fill
///   empty cells.
/// - Train images hold seen objects only. Every test image's first object
///   is unseen; further objects may be any class.
pub fn generate_synthetic(config: &SynthConfig) -> Result<SyntheticSet> {
    config.validate()?;
    let (s, u, m, d, df) = (
        config.num_seen,
        config.num_unseen,
        config.num_meta,
        config.embed_dim,
        config.feature_dim,
    );
    let c = s + u;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let width = |n: usize| format!("{}", n.saturating_sub(1)).len().max(2);
    let seen: Vec<String> = (0..s)
        .map(|i| format!("seen_{:0w$}", i, w = width(s)))
        .collect();
    let unseen: Vec<String> = (0..u)
        .map(|i| format!("unseen_{:0w$}", i, w = width(u)))
        .collect();
    let meta_labels: Vec<String> = (0..m)
        .map(|i| format!("meta_{:0w$}", i, w = width(m)))
        .collect();
    let class_meta: Vec<usize> = (0..s).map(|i| i % m).chain((0..u).map(|j| j % m)).collect();

    let mut centroids = Matrix::zeros(m, d);
    for r in 0..m {
        let v = normalized(gaussian_vec(&mut rng, d));
        centroids.row_mut(r).copy_from_slice(&v);
    }
    let spread = config.meta_spread / libm::sqrt(d as f64);
    let mut class_vectors = Matrix::zeros(c, d);
    for (k, &meta) in class_meta.iter().enumerate() {
        let noise = gaussian_vec(&mut rng, d);
        let v: Vec<f64> = centroids
            .row(meta)
            .iter()
            .zip(&noise)
            .map(|(a, n)| a + spread * n)
            .collect();
        class_vectors.row_mut(k).copy_from_slice(&normalized(v));
    }

    let inv_sqrt_d = 1.0 / libm::sqrt(d as f64);
    let feature_map = Matrix::from_fn(df, d, |_, _| {
        rng.sample::<f64, _>(StandardNormal) * inv_sqrt_d
    });
    let mean_sq = (0..c)
        .map(|k| {
            let g = feature_map.mul_vec(class_vectors.row(k));
            g.iter().map(|x| x * x).sum::<f64>()
        })
        .sum::<f64>()
        / c as f64;
    let background_scale = libm::sqrt(mean_sq / df as f64);

    let labels: Vec<String> = seen.iter().chain(&unseen).cloned().collect();
    let table = EmbeddingTable::new(labels, class_vectors.clone())?;
    let meta_map = table
        .labels()
        .iter()
        .zip(&class_meta)
        .map(|(l, &k)| (l.clone(), meta_labels[k].clone()))
        .collect();

    let mut gen = Generator {
        config,
        rng,
        feature_map: feature_map.clone(),
        class_vectors,
        background_scale,
    };
    let seen_ids: Vec<ClassId> = (1..=s).map(ClassId).collect();
    let unseen_ids: Vec<ClassId> = (s + 1..=c).map(ClassId).collect();
    let all_ids: Vec<ClassId> = (1..=c).map(ClassId).collect();

    let train_images = (0..config.train_images)
        .map(|i| gen.image(format!("train_{i:05}"), &seen_ids, &seen_ids))
        .collect();
    let test_images = (0..config.test_images)
        .map(|i| gen.image(format!("test_{i:05}"), &unseen_ids, &all_ids))
        .collect();

    Ok(SyntheticSet {
        table,
        meta_map,
        seen: seen.clone(),
        unseen: unseen.clone(),
        train: Dataset {
            feature_dim: df,
            images: train_images,
        },
        test: Dataset {
            feature_dim: df,
            images: test_images,
        },
        oracle: OracleRecord {
            seed: config.seed,
            feature_map,
            centroids,
            class_meta,
            background_scale,
            seen,
            unseen,
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub seen: Vec<String>,
    pub unseen: Vec<String>,
    /// Meta-classes that could not contribute an unseen class.
    pub skipped_metas: Vec<String>,
}

/// Picks unseen classes per meta-class from the rare half of its instance
/// distribution: two when the meta-class has at least 9 members, else one.
///
/// The rare half of an `n`-member meta-class is every member whose count
/// is at most the `⌊n/2⌋`-th smallest count, so ties at the boundary are
/// eligible. Meta-classes listed in `exclude` and those with fewer than two
/// members contribute nothing. Output lists keep the order of
/// `class_stats`.
pub fn propose_split<R: Rng>(
    class_stats: &[(String, usize)],
    meta_map: &[(String, String)],
    exclude: &[String],
    rng: &mut R,
) -> Result<Split> {
    if class_stats.is_empty() {
        return Err(Error::EmptyStats);
    }
    let meta_of: BTreeMap<&str, &str> = meta_map
        .iter()
        .map(|(c, m)| (c.as_str(), m.as_str()))
        .collect();
    // Per meta-class: (position in stats, class, count) of each member.
    type Members<'a> = Vec<(usize, &'a str, usize)>;
    let mut groups: Vec<(&str, Members)> = Vec::new();
    for (pos, (class, count)) in class_stats.iter().enumerate() {
        let meta = *meta_of
            .get(class.as_str())
            .ok_or_else(|| Error::Coverage(format!("class `{class}` has no meta-class")))?;
        match groups.iter_mut().find(|(m, _)| *m == meta) {
            Some((_, g)) => g.push((pos, class.as_str(), *count)),
            None => groups.push((meta, vec![(pos, class.as_str(), *count)])),
        }
    }

    let mut chosen = vec![false; class_stats.len()];
    let mut skipped_metas = Vec::new();
    for (meta, members) in &groups {
        if exclude.iter().any(|e| e == meta) || members.len() < 2 {
            skipped_metas.push(String::from(*meta));
            continue;
        }
        let mut counts: Vec<usize> = members.iter().map(|m| m.2).collect();
        counts.sort_unstable();
        let cutoff = counts[members.len() / 2 - 1];
        let mut eligible: Vec<&(usize, &str, usize)> =
            members.iter().filter(|m| m.2 <= cutoff).collect();
        eligible.sort_by(|a, b| a.1.cmp(b.1));
        let want = if members.len() >= 9 { 2 } else { 1 };
        let take = want.min(eligible.len());
        for i in index::sample(rng, eligible.len(), take) {
            chosen[eligible[i].0] = true;
        }
    }

    let (mut seen, mut unseen) = (Vec::new(), Vec::new());
    for (pos, (class, _)) in class_stats.iter().enumerate() {
        if chosen[pos] {
            unseen.push(class.clone());
        } else {
            seen.push(class.clone());
        }
    }
    Ok(Split {
        seen,
        unseen,
        skipped_metas,
    })
}
