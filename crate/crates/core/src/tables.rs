//! CSV files exchanged between pipeline stages.
//!
//! Predictions and ground truth share the Kaggle submission shape:
//!
//! ```text
//! id,images
//! q1,a x b
//! ```
//!
//! where `images` is a space-separated list (ranked for predictions, a set
//! for ground truth). All files are UTF-8 with LF line endings.

use std::io::{Read, Write};

use thiserror::Error;

use crate::head::train::{EpochLoss, LabeledEmbeddings, SplitTag};
use crate::knn::NeighborList;
use crate::metrics::{GroundTruth, MetricError, RankedPredictions};
use crate::recipe::{DatasetView, RecipeStage};

pub const RANKED_HEADER: [&str; 2] = ["id", "images"];
pub const LABELS_HEADER: [&str; 4] = ["id", "label", "true_label", "split"];
pub const STAGES_HEADER: [&str; 4] = [
    "dataset_view",
    "clean_sample_weight",
    "reinit_classifier",
    "epochs",
];
pub const TRACE_HEADER: [&str; 3] = ["epoch", "train_loss", "val_loss"];

#[derive(Debug, Error)]
pub enum TableError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("expected header {expected:?}, found {found:?}")]
    Header { expected: String, found: String },
    #[error("line {line}: {message}")]
    Field { line: u64, message: String },
    #[error(transparent)]
    Metric(#[from] MetricError),
}

fn reader<R: Read>(source: R, expected: &[&str]) -> Result<csv::Reader<R>, TableError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(source);
    let headers = rdr.headers()?;
    if headers.iter().ne(expected.iter().copied()) {
        return Err(TableError::Header {
            expected: expected.join(","),
            found: headers.iter().collect::<Vec<_>>().join(","),
        });
    }
    Ok(rdr)
}

fn writer<W: Write>(sink: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(sink)
}

fn line_of(record: &csv::StringRecord) -> u64 {
    record.position().map_or(0, |p| p.line())
}

fn field_error(record: &csv::StringRecord, message: impl Into<String>) -> TableError {
    TableError::Field {
        line: line_of(record),
        message: message.into(),
    }
}

fn split_images(field: &str) -> impl Iterator<Item = &str> {
    field.split_ascii_whitespace()
}

/// Parses `id,images` rows as ranked predictions.
pub fn read_predictions<R: Read>(source: R) -> Result<RankedPredictions, TableError> {
    let mut rdr = reader(source, &RANKED_HEADER)?;
    let mut out = RankedPredictions::new();
    for record in rdr.records() {
        let record = record?;
        let ranked = split_images(&record[1]).map(str::to_owned).collect();
        out.insert(&record[0], ranked)
            .map_err(|e| field_error(&record, e.to_string()))?;
    }
    Ok(out)
}

/// Parses `id,images` rows as relevant sets.
pub fn read_ground_truth<R: Read>(source: R) -> Result<GroundTruth, TableError> {
    let mut rdr = reader(source, &RANKED_HEADER)?;
    let mut out = GroundTruth::new();
    for record in rdr.records() {
        let record = record?;
        out.insert(&record[0], split_images(&record[1]))
            .map_err(|e| field_error(&record, e.to_string()))?;
    }
    Ok(out)
}

/// Writes kNN output in query order.
pub fn write_neighbor_lists<W: Write>(lists: &[NeighborList], sink: W) -> Result<(), TableError> {
    let mut wtr = writer(sink);
    wtr.write_record(RANKED_HEADER)?;
    for list in lists {
        let images = list.ids().collect::<Vec<_>>().join(" ");
        wtr.write_record([list.query_id.as_str(), images.as_str()])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_predictions<W: Write>(
    predictions: &RankedPredictions,
    sink: W,
) -> Result<(), TableError> {
    let mut wtr = writer(sink);
    wtr.write_record(RANKED_HEADER)?;
    for (query, ranked) in predictions.iter() {
        wtr.write_record([query.as_str(), ranked.join(" ").as_str()])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_ground_truth<W: Write>(truth: &GroundTruth, sink: W) -> Result<(), TableError> {
    let mut wtr = writer(sink);
    wtr.write_record(RANKED_HEADER)?;
    for (query, relevant) in truth.iter() {
        let images = relevant
            .iter()
            .map(String::as_str)
            .collect::<Vec<_>>()
            .join(" ");
        wtr.write_record([query.as_str(), images.as_str()])?;
    }
    wtr.flush()?;
    Ok(())
}

/// One row of a labels file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRow {
    pub id: String,
    pub label: usize,
    pub true_label: usize,
    pub split: SplitTag,
}

pub fn read_labels<R: Read>(source: R) -> Result<Vec<LabelRow>, TableError> {
    let mut rdr = reader(source, &LABELS_HEADER)?;
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let parse_label = |i: usize| {
            record[i]
                .parse::<usize>()
                .map_err(|e| field_error(&record, format!("{}: {e}", LABELS_HEADER[i])))
        };
        let id = record[0].to_owned();
        if id.is_empty() {
            return Err(field_error(&record, "empty id"));
        }
        rows.push(LabelRow {
            id,
            label: parse_label(1)?,
            true_label: parse_label(2)?,
            split: record[3]
                .parse()
                .map_err(|e: String| field_error(&record, e))?,
        });
    }
    Ok(rows)
}

pub fn write_labels<W: Write>(data: &LabeledEmbeddings, sink: W) -> Result<(), TableError> {
    let mut wtr = writer(sink);
    wtr.write_record(LABELS_HEADER)?;
    for i in 0..data.len() {
        wtr.write_record([
            data.ids()[i].clone(),
            data.labels()[i].to_string(),
            data.true_labels()[i].to_string(),
            data.split_tags()[i].to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_stages<R: Read>(source: R) -> Result<Vec<RecipeStage>, TableError> {
    let mut rdr = reader(source, &STAGES_HEADER)?;
    let mut stages = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let err = |m: String| field_error(&record, m);
        let view: DatasetView = record[0].trim().parse().map_err(err)?;
        let weight: f64 = record[1]
            .trim()
            .parse()
            .map_err(|e| err(format!("clean_sample_weight: {e}")))?;
        let reinit = match record[2].trim() {
            "true" | "1" | "yes" => true,
            "false" | "0" | "no" => false,
            other => {
                return Err(err(format!(
                    "reinit_classifier: expected true/false, got {other:?}"
                )))
            }
        };
        let epochs: usize = record[3]
            .trim()
            .parse()
            .map_err(|e| err(format!("epochs: {e}")))?;
        stages
            .push(RecipeStage::new(view, weight, reinit, epochs).map_err(|e| err(e.to_string()))?);
    }
    if stages.is_empty() {
        return Err(TableError::Field {
            line: 1,
            message: "no stages listed".into(),
        });
    }
    Ok(stages)
}

pub fn write_stages<W: Write>(stages: &[RecipeStage], sink: W) -> Result<(), TableError> {
    let mut wtr = writer(sink);
    wtr.write_record(STAGES_HEADER)?;
    for s in stages {
        wtr.write_record([
            s.dataset_view.to_string(),
            s.clean_sample_weight.to_string(),
            s.reinit_classifier.to_string(),
            s.epochs.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_trace<W: Write>(epochs: &[EpochLoss], sink: W) -> Result<(), TableError> {
    let mut wtr = writer(sink);
    wtr.write_record(TRACE_HEADER)?;
    for e in epochs {
        wtr.write_record([
            e.epoch.to_string(),
            e.train_loss.to_string(),
            e.val_loss.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
