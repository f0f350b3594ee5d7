//! A directory of inputs as written by `zsd synth`.

use std::path::{Path, PathBuf};

use zsd_core::data::SyntheticSet;

use crate::error::Result;
use crate::formats::{
    format_meta_map, format_split, format_vectors, load_dataset, load_embeddings, load_meta_map,
    load_split, save_dataset, write_text, DatasetFile, SplitFile,
};
use crate::pipeline::Problem;

pub const EMBEDDINGS: &str = "embeddings.txt";
pub const META: &str = "meta.csv";
pub const SPLIT: &str = "split.txt";
pub const TRAIN: &str = "train.jsonl";
pub const TEST: &str = "test.jsonl";
pub const ORACLE: &str = "oracle.json";

/// Writes every artifact of a synthetic set into `dir`; returns the paths.
pub fn write_synthetic(dir: &Path, set: &SyntheticSet) -> Result<Vec<PathBuf>> {
    let labels = set.table.labels().to_vec();
    let files = [
        (EMBEDDINGS, format_vectors(&labels, set.table.vectors())),
        (META, format_meta_map(&set.meta_map)),
        (
            SPLIT,
            format_split(&SplitFile {
                seen: set.seen.clone(),
                unseen: set.unseen.clone(),
            }),
        ),
        (
            ORACLE,
            serde_json::to_string_pretty(&set.oracle).expect("oracle serializes") + "\n",
        ),
    ];
    let mut written = Vec::new();
    for (name, text) in files {
        let path = dir.join(name);
        write_text(&path, &text)?;
        written.push(path);
    }
    for (name, dataset) in [(TRAIN, &set.train), (TEST, &set.test)] {
        let path = dir.join(name);
        save_dataset(
            &path,
            &DatasetFile {
                labels: labels.clone(),
                dataset: dataset.clone(),
            },
        )?;
        written.push(path);
    }
    Ok(written)
}

/// Embeddings, meta map and split of a directory, assembled.
pub fn load_problem(embeddings: &Path, meta: &Path, split: &Path) -> Result<Problem> {
    Problem::new(
        &load_embeddings(embeddings)?,
        &load_meta_map(meta)?,
        &load_split(split)?,
    )
}

pub fn load_problem_dir(dir: &Path) -> Result<Problem> {
    load_problem(&dir.join(EMBEDDINGS), &dir.join(META), &dir.join(SPLIT))
}

pub fn load_split_dataset(dir: &Path, name: &str) -> Result<DatasetFile> {
    load_dataset(&dir.join(name))
}
