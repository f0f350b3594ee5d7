//! Class word vectors and label-space bookkeeping.
//!
//! Class ids are 1-based and contiguous: seen classes `1..=S`, unseen
//! classes `S+1..=S+U`, background `C+1`. Meta-class ids are 1-based in
//! order of first appearance in the meta map, with the background singleton
//! appended as `M+1`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::linalg::{norm, Matrix};
use crate::{Error, Result};

pub const BACKGROUND_LABEL: &str = "background";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClassId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MetaId(pub usize);

impl ClassId {
    /// Zero-based position, e.g. the column of `W2`.
    #[inline]
    pub fn index(self) -> usize {
        self.0 - 1
    }

    #[inline]
    pub fn from_index(i: usize) -> Self {
        ClassId(i + 1)
    }
}

impl MetaId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 - 1
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for MetaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Per-class semantic vectors, one row per class, plus the background row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    labels: Vec<String>,
    vectors: Matrix,
    background: Option<Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(labels: Vec<String>, vectors: Matrix) -> Result<Self> {
        if labels.len() != vectors.rows() {
            return Err(Error::Shape {
                what: "embedding rows",
                expected: labels.len(),
                found: vectors.rows(),
            });
        }
        let mut seen = BTreeMap::new();
        for l in &labels {
            if seen.insert(l.as_str(), ()).is_some() {
                return Err(Error::DuplicateLabel(l.clone()));
            }
        }
        Ok(EmbeddingTable {
            labels,
            vectors,
            background: None,
        })
    }

    /// Parses `label v1 … vd` records, one per line. Blank lines are skipped.
    /// Vectors are kept as read; call [`EmbeddingTable::finalize`] before use.
    pub fn parse(text: &str) -> Result<Self> {
        let mut labels = Vec::new();
        let mut index = BTreeMap::new();
        let mut data = Vec::new();
        let mut dim = None;

        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            let mut fields = line.split_whitespace();
            let Some(label) = fields.next() else {
                continue;
            };
            let mut count = 0;
            for tok in fields {
                let v: f64 = tok.parse().map_err(|_| Error::Parse {
                    line: line_no,
                    message: format!("`{tok}` is not a number"),
                })?;
                data.push(v);
                count += 1;
            }
            match dim {
                None if count == 0 => {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("label `{label}` has no vector components"),
                    })
                }
                None => dim = Some(count),
                Some(d) if d != count => {
                    return Err(Error::DimensionMismatch {
                        line: line_no,
                        expected: d,
                        found: count,
                    })
                }
                Some(_) => {}
            }
            if index.insert(label.to_string(), labels.len()).is_some() {
                return Err(Error::DuplicateLabel(label.to_string()));
            }
            labels.push(label.to_string());
        }

        let dim = dim.unwrap_or(0);
        let vectors = Matrix::from_vec(labels.len(), dim, data)?;
        Ok(EmbeddingTable {
            labels,
            vectors,
            background: None,
        })
    }

    /// Normalizes every class vector to unit length and sets the background
    /// vector to the mean of the normalized vectors. The background is not
    /// renormalized.
    pub fn finalize(mut self) -> Result<Self> {
        if self.labels.is_empty() {
            return Err(Error::Config("embedding table has no classes".into()));
        }
        let d = self.dim();
        let mut mean = vec![0.0; d];
        for (r, label) in self.labels.iter().enumerate() {
            let row = self.vectors.row_mut(r);
            let n = norm(row);
            if n == 0.0 || !n.is_finite() {
                return Err(Error::DegenerateEmbedding(label.clone()));
            }
            for (x, m) in row.iter_mut().zip(mean.iter_mut()) {
                *x /= n;
                *m += *x;
            }
        }
        let c = self.labels.len() as f64;
        mean.iter_mut().for_each(|m| *m /= c);
        self.background = Some(mean);
        Ok(self)
    }

    /// Reorders (and subsets) the table to the given label order.
    pub fn select<S: AsRef<str>>(&self, order: &[S]) -> Result<Self> {
        let d = self.dim();
        let mut data = Vec::with_capacity(order.len() * d);
        let mut labels = Vec::with_capacity(order.len());
        for name in order {
            let name = name.as_ref();
            let r = self
                .position(name)
                .ok_or_else(|| Error::Coverage(format!("no word vector for class `{name}`")))?;
            data.extend_from_slice(self.vectors.row(r));
            labels.push(name.to_string());
        }
        let table = EmbeddingTable::new(labels, Matrix::from_vec(order.len(), d, data)?)?;
        match self.background {
            Some(_) => table.finalize(),
            None => Ok(table),
        }
    }

    pub fn position(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn vector(&self, row: usize) -> &[f64] {
        self.vectors.row(row)
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn background(&self) -> Option<&[f64]> {
        self.background.as_deref()
    }

    pub fn is_finalized(&self) -> bool {
        self.background.is_some()
    }

    /// `W2ᵀ`: one row per class followed by the background row.
    pub fn stacked(&self) -> Result<Matrix> {
        let bg = self
            .background
            .as_ref()
            .ok_or_else(|| Error::Config("embedding table is not finalized".into()))?;
        let mut data = self.vectors.as_slice().to_vec();
        data.extend_from_slice(bg);
        Matrix::from_vec(self.num_classes() + 1, self.dim(), data)
    }
}

/// Seen/unseen/background ids and the meta-class partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSpace {
    labels: Vec<String>,
    num_seen: usize,
    num_unseen: usize,
    meta_labels: Vec<String>,
    meta_of: Vec<MetaId>,
    members: Vec<Vec<ClassId>>,
}

impl LabelSpace {
    /// Builds the label space from disjoint seen/unseen lists and a
    /// `(class, meta)` assignment covering every class exactly once.
    pub fn build<S: AsRef<str>>(
        seen: &[S],
        unseen: &[S],
        meta_map: &[(String, String)],
    ) -> Result<Self> {
        let mut ids: BTreeMap<&str, ClassId> = BTreeMap::new();
        let mut labels = Vec::with_capacity(seen.len() + unseen.len() + 1);
        for name in seen {
            let name = name.as_ref();
            if ids.insert(name, ClassId(labels.len() + 1)).is_some() {
                return Err(Error::DuplicateLabel(name.to_string()));
            }
            labels.push(name.to_string());
        }
        for name in unseen {
            let name = name.as_ref();
            if ids.contains_key(name) {
                return Err(Error::Disjointness(name.to_string()));
            }
            ids.insert(name, ClassId(labels.len() + 1));
            labels.push(name.to_string());
        }
        if ids.contains_key(BACKGROUND_LABEL) {
            return Err(Error::DuplicateLabel(BACKGROUND_LABEL.to_string()));
        }
        let num_classes = labels.len();

        let mut meta_labels: Vec<String> = Vec::new();
        let mut meta_of: Vec<Option<MetaId>> = vec![None; num_classes];
        for (class, meta) in meta_map {
            let Some(&id) = ids.get(class.as_str()) else {
                return Err(Error::Coverage(format!(
                    "meta map names unknown class `{class}`"
                )));
            };
            let meta_id = match meta_labels.iter().position(|m| m == meta) {
                Some(p) => MetaId(p + 1),
                None => {
                    meta_labels.push(meta.clone());
                    MetaId(meta_labels.len())
                }
            };
            if meta_of[id.index()].replace(meta_id).is_some() {
                return Err(Error::Coverage(format!(
                    "class `{class}` is assigned to more than one meta-class"
                )));
            }
        }
        let mut resolved = Vec::with_capacity(num_classes + 1);
        for (i, m) in meta_of.into_iter().enumerate() {
            match m {
                Some(m) => resolved.push(m),
                None => {
                    return Err(Error::Coverage(format!(
                        "class `{}` has no meta-class",
                        labels[i]
                    )))
                }
            }
        }

        let bg_meta = MetaId(meta_labels.len() + 1);
        resolved.push(bg_meta);
        meta_labels.push(BACKGROUND_LABEL.to_string());
        labels.push(BACKGROUND_LABEL.to_string());

        let mut members = vec![Vec::new(); meta_labels.len()];
        for (i, m) in resolved.iter().enumerate() {
            members[m.index()].push(ClassId::from_index(i));
        }

        Ok(LabelSpace {
            labels,
            num_seen: seen.len(),
            num_unseen: unseen.len(),
            meta_labels,
            meta_of: resolved,
            members,
        })
    }

    pub fn num_seen(&self) -> usize {
        self.num_seen
    }

    pub fn num_unseen(&self) -> usize {
        self.num_unseen
    }

    /// `C = S + U`, background excluded.
    pub fn num_classes(&self) -> usize {
        self.num_seen + self.num_unseen
    }

    /// Number of meta-classes, background singleton excluded.
    pub fn num_meta(&self) -> usize {
        self.meta_labels.len() - 1
    }

    pub fn background(&self) -> ClassId {
        ClassId(self.num_classes() + 1)
    }

    pub fn background_meta(&self) -> MetaId {
        MetaId(self.meta_labels.len())
    }

    pub fn seen(&self) -> impl Iterator<Item = ClassId> + Clone {
        (1..=self.num_seen).map(ClassId)
    }

    pub fn unseen(&self) -> impl Iterator<Item = ClassId> + Clone {
        (self.num_seen + 1..=self.num_classes()).map(ClassId)
    }

    /// All `C + 1` ids, background last.
    pub fn all(&self) -> impl Iterator<Item = ClassId> + Clone {
        (1..=self.num_classes() + 1).map(ClassId)
    }

    pub fn metas(&self) -> impl Iterator<Item = MetaId> + Clone {
        (1..=self.num_meta()).map(MetaId)
    }

    pub fn is_seen(&self, id: ClassId) -> bool {
        (1..=self.num_seen).contains(&id.0)
    }

    pub fn is_unseen(&self, id: ClassId) -> bool {
        (self.num_seen + 1..=self.num_classes()).contains(&id.0)
    }

    pub fn is_background(&self, id: ClassId) -> bool {
        id == self.background()
    }

    pub fn contains(&self, id: ClassId) -> bool {
        (1..=self.num_classes() + 1).contains(&id.0)
    }

    /// The map `g`.
    pub fn meta_of(&self, id: ClassId) -> Option<MetaId> {
        self.meta_of.get(id.0.checked_sub(1)?).copied()
    }

    /// The member set `z_m`, in ascending id order.
    pub fn members(&self, meta: MetaId) -> &[ClassId] {
        meta.0
            .checked_sub(1)
            .and_then(|i| self.members.get(i))
            .map_or(&[], Vec::as_slice)
    }

    pub fn label(&self, id: ClassId) -> &str {
        &self.labels[id.index()]
    }

    pub fn meta_label(&self, meta: MetaId) -> &str {
        &self.meta_labels[meta.index()]
    }

    pub fn id_of(&self, label: &str) -> Option<ClassId> {
        self.labels
            .iter()
            .position(|l| l == label)
            .map(ClassId::from_index)
    }

    pub fn meta_id_of(&self, label: &str) -> Option<MetaId> {
        self.meta_labels
            .iter()
            .position(|l| l == label)
            .map(|i| MetaId(i + 1))
    }

    /// Class labels in id order, background excluded.
    pub fn class_labels(&self) -> &[String] {
        &self.labels[..self.num_classes()]
    }
}
