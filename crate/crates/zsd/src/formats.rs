//! Text file formats.
//!
//! Floats are written with Rust's shortest round-trip representation, so
//! every value reads back bit-identical.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use zsd_core::data::{Dataset, GroundTruth, Image, Proposal};
use zsd_core::infer::Detection;
use zsd_core::loss::LossBreakdown;
use zsd_core::semantics::BACKGROUND_LABEL;
use zsd_core::{Bbox, ClassId, EmbeddingTable, LabelSpace, Matrix};

use crate::error::{Error, Result};

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Word-vector file: `label v1 … vd` per line.
pub fn load_embeddings(path: &Path) -> Result<EmbeddingTable> {
    EmbeddingTable::parse(&read_text(path)?).map_err(|source| Error::Core {
        path: path.into(),
        source,
    })
}

pub fn format_vectors(labels: &[String], vectors: &Matrix) -> String {
    let mut out = String::new();
    for (r, label) in labels.iter().enumerate() {
        out.push_str(label);
        for v in vectors.row(r) {
            write!(out, " {v}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// Meta map: headerless CSV of `class_label,meta_label`.
pub fn parse_meta_map(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (n, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::format(path, n + 1, e.to_string()))?;
        if record.len() != 2 {
            return Err(Error::format(
                path,
                n + 1,
                format!("expected 2 columns, found {}", record.len()),
            ));
        }
        out.push((record[0].to_string(), record[1].to_string()));
    }
    Ok(out)
}

pub fn load_meta_map(path: &Path) -> Result<Vec<(String, String)>> {
    parse_meta_map(&read_text(path)?, path)
}

pub fn format_meta_map(map: &[(String, String)]) -> String {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    for (c, m) in map {
        w.write_record([c, m]).expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("writing to memory")).expect("csv output is UTF-8")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitFile {
    pub seen: Vec<String>,
    pub unseen: Vec<String>,
}

/// Split file: `seen: a,b,…` and `unseen: x,y,…` lines.
pub fn parse_split(text: &str, path: &Path) -> Result<SplitFile> {
    let (mut seen, mut unseen) = (None, None);
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let Some((key, rest)) = line.split_once(':') else {
            return Err(Error::format(path, n + 1, "expected `seen:` or `unseen:`"));
        };
        let list: Vec<String> = rest
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect();
        let slot = match key.trim() {
            "seen" => &mut seen,
            "unseen" => &mut unseen,
            other => return Err(Error::format(path, n + 1, format!("unknown key `{other}`"))),
        };
        if slot.replace(list).is_some() {
            return Err(Error::format(
                path,
                n + 1,
                format!("`{}` given twice", key.trim()),
            ));
        }
    }
    match (seen, unseen) {
        (Some(seen), Some(unseen)) => Ok(SplitFile { seen, unseen }),
        _ => Err(Error::format(
            path,
            text.lines().count(),
            "split needs both `seen:` and `unseen:` lines",
        )),
    }
}

pub fn load_split(path: &Path) -> Result<SplitFile> {
    parse_split(&read_text(path)?, path)
}

pub fn format_split(split: &SplitFile) -> String {
    format!(
        "seen: {}\nunseen: {}\n",
        split.seen.join(","),
        split.unseen.join(",")
    )
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    d_f: usize,
    labels: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProposalRecord {
    feature: Vec<f64>,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GtRecord {
    label: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageRecord {
    image_id: String,
    proposals: Vec<ProposalRecord>,
    gts: Vec<GtRecord>,
}

/// A dataset and the class labels its ground-truth ids refer to
/// (`ClassId(i + 1)` is `labels[i]`).
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    pub labels: Vec<String>,
    pub dataset: Dataset,
}

/// JSON-lines dataset: a `{d_f, labels}` header, then one image per line.
pub fn format_dataset(file: &DatasetFile) -> String {
    let header = Header {
        d_f: file.dataset.feature_dim,
        labels: file.labels.clone(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for im in &file.dataset.images {
        let record = ImageRecord {
            image_id: im.id.clone(),
            proposals: im
                .proposals
                .iter()
                .map(|p| ProposalRecord {
                    feature: p.feature.clone(),
                    bbox: p.bbox.to_array(),
                })
                .collect(),
            gts: im
                .gts
                .iter()
                .map(|g| GtRecord {
                    label: file.labels[g.label.index()].clone(),
                    bbox: g.bbox.to_array(),
                })
                .collect(),
        };
        out.push_str(&serde_json::to_string(&record).expect("record serializes"));
        out.push('\n');
    }
    out
}

fn checked_box(a: [f64; 4], path: &Path, line: usize) -> Result<Bbox> {
    let b = Bbox::from_array(a);
    if !b.is_well_ordered() {
        return Err(Error::format(path, line, format!("malformed box {a:?}")));
    }
    Ok(b)
}

pub fn parse_dataset(text: &str, path: &Path) -> Result<DatasetFile> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let Some((_, first)) = lines.next() else {
        return Err(Error::format(path, 1, "missing header line"));
    };
    let header: Header =
        serde_json::from_str(first).map_err(|e| Error::format(path, 1, format!("header: {e}")))?;
    let mut images = Vec::new();
    for (n, line) in lines {
        let line_no = n + 1;
        let record: ImageRecord =
            serde_json::from_str(line).map_err(|e| Error::format(path, line_no, e.to_string()))?;
        let mut proposals = Vec::with_capacity(record.proposals.len());
        for p in record.proposals {
            if p.feature.len() != header.d_f {
                return Err(Error::Core {
                    path: path.into(),
                    source: zsd_core::Error::DimensionMismatch {
                        line: line_no,
                        expected: header.d_f,
                        found: p.feature.len(),
                    },
                });
            }
            proposals.push(Proposal {
                feature: p.feature,
                bbox: checked_box(p.bbox, path, line_no)?,
            });
        }
        let mut gts = Vec::with_capacity(record.gts.len());
        for g in record.gts {
            let pos = header
                .labels
                .iter()
                .position(|l| *l == g.label)
                .filter(|_| g.label != BACKGROUND_LABEL)
                .ok_or_else(|| {
                    Error::format(path, line_no, format!("unknown label `{}`", g.label))
                })?;
            gts.push(GroundTruth {
                label: ClassId::from_index(pos),
                bbox: checked_box(g.bbox, path, line_no)?,
            });
        }
        images.push(Image {
            id: record.image_id,
            proposals,
            gts,
        });
    }
    Ok(DatasetFile {
        labels: header.labels,
        dataset: Dataset {
            feature_dim: header.d_f,
            images,
        },
    })
}

pub fn load_dataset(path: &Path) -> Result<DatasetFile> {
    parse_dataset(&read_text(path)?, path)
}

pub fn save_dataset(path: &Path, file: &DatasetFile) -> Result<()> {
    write_text(path, &format_dataset(file))
}

impl DatasetFile {
    /// The dataset with ground-truth ids renumbered into `space`.
    pub fn relabel(&self, space: &LabelSpace) -> Result<Dataset> {
        let mut dataset = self.dataset.clone();
        for im in &mut dataset.images {
            for g in &mut im.gts {
                let label = &self.labels[g.label.index()];
                g.label = space.id_of(label).ok_or_else(|| {
                    Error::Model(zsd_core::Error::Coverage(format!(
                        "label `{label}` of image `{}` is not in the label space",
                        im.id
                    )))
                })?;
            }
        }
        Ok(dataset)
    }
}

/// Loss history CSV, one row per optimizer step.
pub fn format_loss_csv(history: &[LossBreakdown]) -> String {
    let mut out = String::from("step,l_mm,l_mc,l_cls,l_reg,total\n");
    for (step, h) in history.iter().enumerate() {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            step + 1,
            h.l_mm,
            h.l_mc,
            h.l_cls,
            h.l_reg,
            h.total
        )
        .unwrap();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    pub label: String,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

pub fn format_detections(detections: &[Detection], space: &LabelSpace) -> String {
    let mut out = String::new();
    for d in detections {
        let record = DetectionRecord {
            image_id: d.image_id.clone(),
            label: space.label(d.label).to_string(),
            score: d.score,
            bbox: d.bbox.to_array(),
        };
        out.push_str(&serde_json::to_string(&record).expect("detection serializes"));
        out.push('\n');
    }
    out
}

pub fn parse_detections(text: &str, path: &Path) -> Result<Vec<DetectionRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| Error::format(path, n + 1, e.to_string()))
        })
        .collect()
}
