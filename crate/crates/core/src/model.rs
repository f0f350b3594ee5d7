//! Semantic alignment scoring and the box head.

use alloc::string::String;
use alloc::vec::Vec;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bbox::BoxDelta;
use crate::linalg::{dot, norm, Matrix};
use crate::semantics::{ClassId, EmbeddingTable};
use crate::train::TrainConfig;
use crate::{Error, Result};

/// Trainable projection `W1` (feature → semantic space), the fixed class
/// vectors `W2`, and a linear per-seen-class box regressor.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    labels: Vec<String>,
    num_seen: usize,
    num_unseen: usize,
    w1: Matrix,
    /// `W2ᵀ`, `(C+1) × d`, background last.
    class_vectors: Matrix,
    column_norms: Vec<f64>,
    box_weights: Matrix,
    box_bias: Vec<f64>,
    config: TrainConfig,
}

/// Raw parameter bundle, used to restore checkpoints.
#[derive(Debug, Clone)]
pub struct ModelParts {
    pub labels: Vec<String>,
    pub num_seen: usize,
    pub num_unseen: usize,
    pub w1: Matrix,
    pub class_vectors: Matrix,
    pub box_weights: Matrix,
    pub box_bias: Vec<f64>,
    pub config: TrainConfig,
}

impl Model {
    /// Glorot-uniform `W1`, zero box head. `table` must be finalized and
    /// ordered seen-first, then unseen.
    pub fn init(
        config: &TrainConfig,
        table: &EmbeddingTable,
        num_seen: usize,
        feature_dim: usize,
        seed: u64,
    ) -> Result<Model> {
        let class_vectors = table.stacked()?;
        let d = table.dim();
        if num_seen > table.num_classes() {
            return Err(Error::Config("more seen classes than embeddings".into()));
        }
        if feature_dim == 0 || d == 0 {
            return Err(Error::Config(
                "feature and embedding dimensions must be positive".into(),
            ));
        }
        let a = libm::sqrt(6.0 / (feature_dim + d) as f64);
        let dist =
            Uniform::new_inclusive(-a, a).map_err(|e| Error::Config(alloc::format!("{e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w1 = Matrix::from_fn(feature_dim, d, |_, _| dist.sample(&mut rng));
        Model::from_parts(ModelParts {
            labels: table.labels().to_vec(),
            num_seen,
            num_unseen: table.num_classes() - num_seen,
            w1,
            class_vectors,
            box_weights: Matrix::zeros(feature_dim, 4 * num_seen),
            box_bias: alloc::vec![0.0; 4 * num_seen],
            config: config.clone(),
        })
    }

    pub fn from_parts(parts: ModelParts) -> Result<Model> {
        let c = parts.num_seen + parts.num_unseen;
        let shape = |what, expected, found| {
            if expected == found {
                Ok(())
            } else {
                Err(Error::Shape {
                    what,
                    expected,
                    found,
                })
            }
        };
        shape("labels", c, parts.labels.len())?;
        shape("W2 columns", c + 1, parts.class_vectors.rows())?;
        shape("W1 columns", parts.class_vectors.cols(), parts.w1.cols())?;
        shape("box weight rows", parts.w1.rows(), parts.box_weights.rows())?;
        shape(
            "box weight columns",
            4 * parts.num_seen,
            parts.box_weights.cols(),
        )?;
        shape("box bias", 4 * parts.num_seen, parts.box_bias.len())?;
        let column_norms = (0..=c).map(|r| norm(parts.class_vectors.row(r))).collect();
        Ok(Model {
            labels: parts.labels,
            num_seen: parts.num_seen,
            num_unseen: parts.num_unseen,
            w1: parts.w1,
            class_vectors: parts.class_vectors,
            column_norms,
            box_weights: parts.box_weights,
            box_bias: parts.box_bias,
            config: parts.config,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn num_seen(&self) -> usize {
        self.num_seen
    }

    pub fn num_unseen(&self) -> usize {
        self.num_unseen
    }

    pub fn num_classes(&self) -> usize {
        self.num_seen + self.num_unseen
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn w1(&self) -> &Matrix {
        &self.w1
    }

    pub fn w1_mut(&mut self) -> &mut Matrix {
        &mut self.w1
    }

    pub fn class_vectors(&self) -> &Matrix {
        &self.class_vectors
    }

    /// Class vector for `id`, background included.
    pub fn class_vector(&self, id: ClassId) -> &[f64] {
        self.class_vectors.row(id.index())
    }

    pub fn column_norm(&self, id: ClassId) -> f64 {
        self.column_norms[id.index()]
    }

    pub fn box_weights(&self) -> &Matrix {
        &self.box_weights
    }

    pub fn box_bias(&self) -> &[f64] {
        &self.box_bias
    }

    pub(crate) fn box_params_mut(&mut self) -> (&mut Matrix, &mut Vec<f64>) {
        (&mut self.box_weights, &mut self.box_bias)
    }

    pub fn box_weights_mut(&mut self) -> &mut Matrix {
        &mut self.box_weights
    }

    pub fn box_bias_mut(&mut self) -> &mut [f64] {
        &mut self.box_bias
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn set_config(&mut self, config: TrainConfig) {
        self.config = config;
    }

    fn check_feature(&self, feature: &[f64]) -> Result<()> {
        if feature.len() != self.feature_dim() {
            return Err(Error::Shape {
                what: "feature",
                expected: self.feature_dim(),
                found: feature.len(),
            });
        }
        Ok(())
    }

    /// `W1ᵀ f`, the feature projected into semantic space.
    pub fn project(&self, feature: &[f64]) -> Result<Vec<f64>> {
        self.check_feature(feature)?;
        Ok(self.w1.transpose_mul_vec(feature))
    }

    /// Scores `o = (W1 W2)ᵀ f` for all `C + 1` labels.
    pub fn forward_scores(&self, feature: &[f64]) -> Result<Vec<f64>> {
        let h = self.project(feature)?;
        Ok(self.class_vectors.mul_vec(&h))
    }

    /// `ô_c = o_c / (‖v_c‖ ‖f‖)`, using each column's stored norm.
    pub fn normalized_scores(&self, scores: &[f64], feature: &[f64]) -> Result<Vec<f64>> {
        self.check_feature(feature)?;
        if scores.len() != self.column_norms.len() {
            return Err(Error::Shape {
                what: "score vector",
                expected: self.column_norms.len(),
                found: scores.len(),
            });
        }
        let fnorm = norm(feature);
        if fnorm == 0.0 {
            return Err(Error::ZeroFeature);
        }
        Ok(scores
            .iter()
            .zip(&self.column_norms)
            .map(|(o, vn)| o / (vn * fnorm))
            .collect())
    }

    /// Raw box-head output, `4 S` values grouped per seen class.
    pub fn box_outputs(&self, feature: &[f64]) -> Result<Vec<f64>> {
        self.check_feature(feature)?;
        let mut out = self.box_weights.transpose_mul_vec(feature);
        out.iter_mut()
            .zip(&self.box_bias)
            .for_each(|(o, b)| *o += b);
        Ok(out)
    }

    pub fn forward_boxes(&self, feature: &[f64]) -> Result<Vec<BoxDelta>> {
        Ok(self
            .box_outputs(feature)?
            .chunks_exact(4)
            .map(BoxDelta::from_slice)
            .collect())
    }

    /// Offsets predicted for one seen class.
    pub fn box_delta(&self, feature: &[f64], seen: ClassId) -> Result<BoxDelta> {
        self.check_feature(feature)?;
        if seen.0 == 0 || seen.0 > self.num_seen {
            return Err(Error::InvalidTarget(seen));
        }
        let base = 4 * seen.index();
        let mut out = [0.0; 4];
        for (k, o) in out.iter_mut().enumerate() {
            let col = base + k;
            *o = self.box_bias[col]
                + feature
                    .iter()
                    .enumerate()
                    .map(|(r, f)| f * self.box_weights.get(r, col))
                    .sum::<f64>();
        }
        Ok(BoxDelta::from_slice(&out))
    }

    /// `W1 v_c` for every class (background excluded), one row per class.
    pub fn modified_embeddings(&self) -> Matrix {
        let c = self.num_classes();
        let mut out = Matrix::zeros(c, self.feature_dim());
        for r in 0..c {
            let v = self.class_vectors.row(r);
            for (i, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = dot(self.w1.row(i), v);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn table(rows: &[&[f64]]) -> EmbeddingTable {
        let labels = (0..rows.len()).map(|i| alloc::format!("c{i}")).collect();
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        EmbeddingTable::new(
            labels,
            Matrix::from_vec(rows.len(), rows[0].len(), data).unwrap(),
        )
        .unwrap()
        .finalize()
        .unwrap()
    }

    fn identity_model(t: &EmbeddingTable, seen: usize) -> Model {
        let mut m = Model::init(&TrainConfig::default(), t, seen, t.dim(), 0).unwrap();
        *m.w1_mut() = Matrix::identity(t.dim());
        m
    }

    #[test]
    fn identity_projection_scores_own_vector_as_one() {
        let t = table(&[&[1.0, 0.0, 0.0], &[0.0, 3.0, 4.0]]);
        let m = identity_model(&t, 1);
        let o = m.forward_scores(t.vector(1)).unwrap();
        assert_abs_diff_eq!(o[1], 1.0, epsilon = 1e-15);
        assert_eq!(o.len(), 3);
        assert_eq!(m.forward_scores(&[0.0; 3]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn scores_match_dense_product() {
        // Oracle: form W1·W2 explicitly, then multiply by f.
        let t = table(&[&[1.0, 2.0, 0.5], &[-1.0, 0.5, 2.0]]);
        let mut m = Model::init(&TrainConfig::default(), &t, 1, 3, 11).unwrap();
        let w1 =
            Matrix::from_vec(3, 3, vec![0.3, -0.2, 0.9, 1.1, 0.0, -0.4, 0.25, 0.7, 0.5]).unwrap();
        *m.w1_mut() = w1.clone();
        let w2 = t.stacked().unwrap();
        let f = [0.4, -1.3, 2.2];
        let o = m.forward_scores(&f).unwrap();
        for c in 0..3 {
            let mut expected = 0.0;
            for i in 0..3 {
                let mut w = 0.0;
                for k in 0..3 {
                    w += w1.get(i, k) * w2.get(c, k);
                }
                expected += w * f[i];
            }
            assert_abs_diff_eq!(o[c], expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn normalized_score_division() {
        let t = table(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let m = identity_model(&t, 1);
        let f = [2.0, 0.0];
        let o = m.forward_scores(&f).unwrap();
        assert_abs_diff_eq!(o[0], 2.0);
        let n = m.normalized_scores(&[1.0, 0.0, 0.0], &f).unwrap();
        assert_abs_diff_eq!(n[0], 0.5);
        assert_eq!(
            m.normalized_scores(&o, &[0.0, 0.0]).unwrap_err(),
            Error::ZeroFeature
        );
    }

    #[test]
    fn normalized_scores_match_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let t = table(&refs);
        let m = Model::init(&TrainConfig::default(), &t, 3, 6, 3).unwrap();
        let f: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let o = m.forward_scores(&f).unwrap();
        let n = m.normalized_scores(&o, &f).unwrap();
        let w2 = t.stacked().unwrap();
        let fnorm = libm::sqrt(f.iter().map(|x| x * x).sum::<f64>());
        for c in 0..5 {
            let vn = libm::sqrt(w2.row(c).iter().map(|x| x * x).sum::<f64>());
            assert_abs_diff_eq!(n[c], o[c] / (vn * fnorm), epsilon = 1e-12);
        }
    }

    #[test]
    fn box_outputs_per_class_slices() {
        let t = table(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let mut m = Model::init(&TrainConfig::default(), &t, 2, 3, 0).unwrap();
        assert_eq!(m.box_outputs(&[1.0, 2.0, 3.0]).unwrap().len(), 8);
        assert!(m
            .forward_boxes(&[1.0, 2.0, 3.0])
            .unwrap()
            .iter()
            .all(|d| *d == BoxDelta::default()));

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for x in m.box_weights_mut().as_mut_slice() {
            *x = rng.random_range(-1.0..1.0);
        }
        for x in m.box_bias_mut() {
            *x = rng.random_range(-1.0..1.0);
        }
        let f = [0.5, -0.25, 1.5];
        let deltas = m.forward_boxes(&f).unwrap();
        for s in 0..2 {
            let single = m.box_delta(&f, ClassId(s + 1)).unwrap();
            assert_eq!(single.to_array(), deltas[s].to_array());
            for k in 0..4 {
                let col = 4 * s + k;
                let expected: f64 = (0..3)
                    .map(|r| f[r] * m.box_weights().get(r, col))
                    .sum::<f64>()
                    + m.box_bias()[col];
                assert_abs_diff_eq!(deltas[s].to_array()[k], expected, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let t = table(&[&[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0]]);
        let cfg = TrainConfig::default();
        let a = Model::init(&cfg, &t, 1, 4, 42).unwrap();
        let b = Model::init(&cfg, &t, 1, 4, 42).unwrap();
        let c = Model::init(&cfg, &t, 1, 4, 43).unwrap();
        assert_eq!(a.w1().as_slice(), b.w1().as_slice());
        assert_ne!(a.w1().as_slice(), c.w1().as_slice());
        let bound = libm::sqrt(6.0 / 8.0);
        assert_eq!((a.w1().rows(), a.w1().cols()), (4, 4));
        assert!(a.w1().as_slice().iter().all(|x| x.abs() <= bound));
    }

    #[test]
    fn shape_errors() {
        let t = table(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let m = identity_model(&t, 1);
        assert!(matches!(m.forward_scores(&[1.0]), Err(Error::Shape { .. })));
        assert!(matches!(
            m.forward_boxes(&[1.0, 2.0, 3.0]),
            Err(Error::Shape { .. })
        ));
    }
}
