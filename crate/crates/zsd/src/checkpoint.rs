//! Model checkpoints as JSON.
//!
//! Matrices are stored flat in row-major order. The checkpoint also carries
//! the stacked class vectors and the label space so prediction needs no
//! other input.

use std::path::Path;

use serde::{Deserialize, Serialize};
use zsd_core::model::ModelParts;
use zsd_core::train::TrainConfig;
use zsd_core::{LabelSpace, Matrix, Model};

use crate::error::{Error, Result};
use crate::formats::{read_text, write_text};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub d_f: usize,
    pub d: usize,
    #[serde(rename = "C")]
    pub c: usize,
    #[serde(rename = "S")]
    pub s: usize,
    #[serde(rename = "U")]
    pub u: usize,
    pub labels: Vec<String>,
    /// `d_f × d`.
    #[serde(rename = "W1")]
    pub w1: Vec<f64>,
    /// `(C + 1) × d`, one class vector per row, background last.
    #[serde(rename = "W2")]
    pub w2: Vec<f64>,
    /// `d_f × 4S`.
    pub box_weights: Vec<f64>,
    pub box_bias: Vec<f64>,
    pub config: TrainConfig,
    pub space: LabelSpace,
}

impl Checkpoint {
    pub fn new(model: &Model, space: &LabelSpace) -> Self {
        Checkpoint {
            format: FORMAT_VERSION,
            d_f: model.feature_dim(),
            d: model.embed_dim(),
            c: model.num_classes(),
            s: model.num_seen(),
            u: model.num_unseen(),
            labels: model.labels().to_vec(),
            w1: model.w1().as_slice().to_vec(),
            w2: model.class_vectors().as_slice().to_vec(),
            box_weights: model.box_weights().as_slice().to_vec(),
            box_bias: model.box_bias().to_vec(),
            config: model.config().clone(),
            space: space.clone(),
        }
    }

    pub fn restore(&self) -> Result<(Model, LabelSpace)> {
        if self.format != FORMAT_VERSION {
            return Err(zsd_core::Error::Config(format!(
                "unsupported checkpoint format {}",
                self.format
            ))
            .into());
        }
        if self.c != self.s + self.u {
            return Err(zsd_core::Error::Config(format!(
                "C = {} but S + U = {}",
                self.c,
                self.s + self.u
            ))
            .into());
        }
        if self.space.class_labels() != self.labels.as_slice() {
            return Err(zsd_core::Error::Config(
                "checkpoint labels disagree with its label space".into(),
            )
            .into());
        }
        let model = Model::from_parts(ModelParts {
            labels: self.labels.clone(),
            num_seen: self.s,
            num_unseen: self.u,
            w1: Matrix::from_vec(self.d_f, self.d, self.w1.clone())?,
            class_vectors: Matrix::from_vec(self.c + 1, self.d, self.w2.clone())?,
            box_weights: Matrix::from_vec(self.d_f, 4 * self.s, self.box_weights.clone())?,
            box_bias: self.box_bias.clone(),
            config: self.config.clone(),
        })?;
        Ok((model, self.space.clone()))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }
}

pub fn save_checkpoint(path: &Path, model: &Model, space: &LabelSpace) -> Result<()> {
    write_text(path, &Checkpoint::new(model, space).to_json())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, LabelSpace)> {
    let text = read_text(path)?;
    let ck: Checkpoint =
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.line(), e.to_string()))?;
    ck.restore().map_err(|e| match e {
        Error::Model(source) => Error::Core {
            path: path.into(),
            source,
        },
        other => other,
    })
}
