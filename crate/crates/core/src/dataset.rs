//! Train / validation / retrieval splits of a synthetic dataset, and their
//! on-disk layout.
//!
//! A dataset directory holds:
//!
//! | file               | content                                   |
//! |--------------------|-------------------------------------------|
//! | `meta.json`        | class counts and split sizes              |
//! | `train.glre`       | training features                         |
//! | `train_labels.csv` | `id,label,true_label,split`               |
//! | `val.glre`         | validation features                       |
//! | `val_labels.csv`   | validation labels                         |
//! | `query.glre`       | retrieval queries (raw features)          |
//! | `index.glre`       | retrieval index (raw features)            |
//! | `truth.csv`        | `id,images` relevant index ids per query  |

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embstore::{load_embeddings, save_embeddings, EmbeddingSet, FormatError};
use crate::head::synth::SyntheticData;
use crate::head::train::{LabeledEmbeddings, SplitTag};
use crate::head::HeadError;
use crate::metrics::{GroundTruth, MetricError};
use crate::recipe::RecipeData;
use crate::tables::{self, LabelRow, TableError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Format { path: PathBuf, source: FormatError },
    #[error("{path}: {source}")]
    Table { path: PathBuf, source: TableError },
    #[error("{path}: {source}")]
    Meta {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// How samples are held out of training.
#[derive(Debug, Clone, PartialEq)]
pub struct HoldoutRules {
    /// A clean class contributes one validation sample when it has at least
    /// this many samples.
    pub min_class_samples: usize,
    pub queries_per_class: usize,
    pub index_per_class: usize,
}

impl Default for HoldoutRules {
    fn default() -> Self {
        Self {
            min_class_samples: 4,
            queries_per_class: 1,
            index_per_class: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub num_classes: usize,
    pub clean_classes: usize,
    pub d_in: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub query_samples: usize,
    pub index_samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub meta: DatasetMeta,
    pub train: LabeledEmbeddings,
    pub val: LabeledEmbeddings,
    pub query: EmbeddingSet,
    pub index: EmbeddingSet,
    pub truth: GroundTruth,
}

impl DatasetSplits {
    pub fn recipe_data(&self) -> RecipeData {
        RecipeData {
            train: self.train.clone(),
            val: self.val.clone(),
            num_classes: self.meta.num_classes,
            clean_classes: self.meta.clean_classes,
        }
    }
}

/// Splits generated samples by true class, in generation order:
///
/// * clean classes with at least `min_class_samples` samples give their
///   first sample to validation;
/// * every class whose remaining samples exceed `queries + index` gives the
///   next ones to the query and index sets, keeping at least one for
///   training;
/// * everything else trains.
pub fn split_dataset(
    data: &SyntheticData,
    rules: &HoldoutRules,
) -> Result<DatasetSplits, DatasetError> {
    let samples = &data.samples;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.num_classes];
    for (i, &c) in samples.true_labels().iter().enumerate() {
        by_class[c].push(i);
    }
    let (mut train, mut val, mut query, mut index) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut query_class = Vec::new();
    let mut index_class = Vec::new();
    for (class, members) in by_class.iter().enumerate() {
        let mut rest = members.as_slice();
        if class < data.clean_classes
            && members.len() >= rules.min_class_samples
            && !rest.is_empty()
        {
            val.push(rest[0]);
            rest = &rest[1..];
        }
        let held = rules.queries_per_class + rules.index_per_class;
        if held > 0 && rest.len() > held {
            for &i in &rest[..rules.queries_per_class] {
                query.push(i);
                query_class.push(class);
            }
            for &i in &rest[rules.queries_per_class..held] {
                index.push(i);
                index_class.push(class);
            }
            rest = &rest[held..];
        }
        train.extend_from_slice(rest);
    }
    train.sort_unstable();

    let features = |rows: &[usize]| -> Result<EmbeddingSet, DatasetError> {
        let ids = rows.iter().map(|&i| samples.ids()[i].clone()).collect();
        let mut data = Vec::with_capacity(rows.len() * samples.d_in());
        for &i in rows {
            data.extend_from_slice(samples.feature(i));
        }
        EmbeddingSet::new(ids, samples.d_in(), data).map_err(|e| DatasetError::Head(e.into()))
    };

    let mut truth = GroundTruth::new();
    for (q, &qc) in query.iter().zip(&query_class) {
        let relevant = index
            .iter()
            .zip(&index_class)
            .filter(|(_, &ic)| ic == qc)
            .map(|(&i, _)| samples.ids()[i].clone());
        truth.insert(samples.ids()[*q].clone(), relevant)?;
    }

    let val_set = {
        // Validation scores against true labels.
        let v = samples.select(&val);
        LabeledEmbeddings::new(
            v.ids().to_vec(),
            v.d_in(),
            v.features().to_vec(),
            v.true_labels().to_vec(),
            v.true_labels().to_vec(),
            vec![1.0; v.len()],
            vec![SplitTag::Clean; v.len()],
        )?
    };
    let meta = DatasetMeta {
        num_classes: data.num_classes,
        clean_classes: data.clean_classes,
        d_in: samples.d_in(),
        train_samples: train.len(),
        val_samples: val.len(),
        query_samples: query.len(),
        index_samples: index.len(),
    };
    Ok(DatasetSplits {
        meta,
        train: samples.select(&train),
        val: val_set,
        query: features(&query)?,
        index: features(&index)?,
        truth,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>, DatasetError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| DatasetError::Io {
            path: path.to_owned(),
            source,
        })
}

fn open(path: &Path) -> Result<BufReader<File>, DatasetError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|source| DatasetError::Io {
            path: path.to_owned(),
            source,
        })
}

pub fn write_embedding_file(path: &Path, set: &EmbeddingSet) -> Result<(), DatasetError> {
    let mut w = create(path)?;
    save_embeddings(set, &mut w).map_err(|source| DatasetError::Format {
        path: path.to_owned(),
        source,
    })?;
    Ok(())
}

pub fn read_embedding_file(path: &Path) -> Result<EmbeddingSet, DatasetError> {
    load_embeddings(open(path)?).map_err(|source| DatasetError::Format {
        path: path.to_owned(),
        source,
    })
}

fn table_err(path: &Path) -> impl FnOnce(TableError) -> DatasetError + '_ {
    move |source| DatasetError::Table {
        path: path.to_owned(),
        source,
    }
}

fn features_of(data: &LabeledEmbeddings) -> Result<EmbeddingSet, DatasetError> {
    EmbeddingSet::new(data.ids().to_vec(), data.d_in(), data.features().to_vec())
        .map_err(|e| DatasetError::Head(e.into()))
}

fn write_labeled(dir: &Path, name: &str, data: &LabeledEmbeddings) -> Result<(), DatasetError> {
    write_embedding_file(&dir.join(format!("{name}.glre")), &features_of(data)?)?;
    let path = dir.join(format!("{name}_labels.csv"));
    tables::write_labels(data, create(&path)?).map_err(table_err(&path))
}

fn read_labeled(dir: &Path, name: &str) -> Result<LabeledEmbeddings, DatasetError> {
    let features = read_embedding_file(&dir.join(format!("{name}.glre")))?;
    let path = dir.join(format!("{name}_labels.csv"));
    let rows: Vec<LabelRow> = tables::read_labels(open(&path)?).map_err(table_err(&path))?;
    if rows.len() != features.len() {
        return Err(DatasetError::Inconsistent(format!(
            "{name}: {} feature rows but {} label rows",
            features.len(),
            rows.len()
        )));
    }
    let lookup: HashMap<&str, &LabelRow> = rows.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut labels = Vec::with_capacity(rows.len());
    let mut true_labels = Vec::with_capacity(rows.len());
    let mut split = Vec::with_capacity(rows.len());
    for id in features.ids() {
        let row = lookup
            .get(id.as_str())
            .ok_or_else(|| DatasetError::Inconsistent(format!("{name}: no label for id {id:?}")))?;
        labels.push(row.label);
        true_labels.push(row.true_label);
        split.push(row.split);
    }
    let n = features.len();
    let (ids, d_in, data, _) = features.into_parts();
    Ok(LabeledEmbeddings::new(
        ids,
        d_in,
        data,
        labels,
        true_labels,
        vec![1.0; n],
        split,
    )?)
}

pub fn write_dataset(dir: &Path, splits: &DatasetSplits) -> Result<(), DatasetError> {
    std::fs::create_dir_all(dir).map_err(|source| DatasetError::Io {
        path: dir.to_owned(),
        source,
    })?;
    let meta_path = dir.join("meta.json");
    let mut w = create(&meta_path)?;
    serde_json::to_writer_pretty(&mut w, &splits.meta).map_err(|source| DatasetError::Meta {
        path: meta_path.clone(),
        source,
    })?;
    w.write_all(b"\n")
        .and_then(|_| w.flush())
        .map_err(|source| DatasetError::Io {
            path: meta_path.clone(),
            source,
        })?;
    write_labeled(dir, "train", &splits.train)?;
    write_labeled(dir, "val", &splits.val)?;
    write_embedding_file(&dir.join("query.glre"), &splits.query)?;
    write_embedding_file(&dir.join("index.glre"), &splits.index)?;
    let truth_path = dir.join("truth.csv");
    tables::write_ground_truth(&splits.truth, create(&truth_path)?).map_err(table_err(&truth_path))
}

pub fn read_dataset(dir: &Path) -> Result<DatasetSplits, DatasetError> {
    let meta_path = dir.join("meta.json");
    let meta: DatasetMeta =
        serde_json::from_reader(open(&meta_path)?).map_err(|source| DatasetError::Meta {
            path: meta_path.clone(),
            source,
        })?;
    let train = read_labeled(dir, "train")?;
    let val = read_labeled(dir, "val")?;
    let query = read_embedding_file(&dir.join("query.glre"))?;
    let index = read_embedding_file(&dir.join("index.glre"))?;
    let truth_path = dir.join("truth.csv");
    let truth = tables::read_ground_truth(open(&truth_path)?).map_err(table_err(&truth_path))?;

    if meta.clean_classes < 3 || meta.clean_classes > meta.num_classes {
        return Err(DatasetError::Inconsistent(format!(
            "clean classes {} out of range for {} classes",
            meta.clean_classes, meta.num_classes
        )));
    }
    for (name, set) in [("train", &train), ("val", &val)] {
        if set.d_in() != meta.d_in {
            return Err(DatasetError::Inconsistent(format!(
                "{name} features have dim {}",
                set.d_in()
            )));
        }
        if let Some(l) = set
            .labels()
            .iter()
            .chain(set.true_labels())
            .find(|&&l| l >= meta.num_classes)
        {
            return Err(DatasetError::Inconsistent(format!(
                "{name} label {l} >= {} classes",
                meta.num_classes
            )));
        }
    }
    if let Some(l) = val.labels().iter().find(|&&l| l >= meta.clean_classes) {
        return Err(DatasetError::Inconsistent(format!(
            "validation label {l} outside the {} clean classes",
            meta.clean_classes
        )));
    }
    Ok(DatasetSplits {
        meta,
        train,
        val,
        query,
        index,
        truth,
    })
}
