//! Staged training: clean view first, then transfer to the full noisy class
//! set with a re-drawn classifier, then noisy training with up-weighted
//! clean samples.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::embstore::EmbeddingSet;
use crate::head::train::{train, LabeledEmbeddings, TrainOutcome};
use crate::head::{embed_set, CosineHead, HeadError, TrainConfig};
use crate::knn::{top_k_search, KnnError};
use crate::metrics::{mean_ap_at_100, GroundTruth, MetricError, RankedPredictions, MAP_CUTOFF};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetView {
    /// Clean-tagged samples only, over the clean class subset.
    CleanOnly,
    /// Every training sample with observed (possibly wrong) labels, over
    /// all classes.
    FullNoisy,
}

impl fmt::Display for DatasetView {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetView::CleanOnly => "clean-only",
            DatasetView::FullNoisy => "full-noisy",
        })
    }
}

impl FromStr for DatasetView {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "clean-only" | "clean" => Ok(DatasetView::CleanOnly),
            "full-noisy" | "noisy" => Ok(DatasetView::FullNoisy),
            other => Err(format!("unknown dataset view {other:?}")),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RecipeError {
    #[error("invalid stage: {0}")]
    InvalidStage(String),
    #[error("stage {stage}: head has {head} classes but the {view} view has {view_classes}; set reinit_classifier")]
    ClassCountMismatch {
        stage: usize,
        head: usize,
        view: DatasetView,
        view_classes: usize,
    },
    #[error("stage {stage}: the {view} view has no samples")]
    EmptyView { stage: usize, view: DatasetView },
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Knn(#[from] KnnError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecipeStage {
    pub dataset_view: DatasetView,
    pub clean_sample_weight: f64,
    pub reinit_classifier: bool,
    pub epochs: usize,
}

impl RecipeStage {
    pub fn new(
        dataset_view: DatasetView,
        clean_sample_weight: f64,
        reinit_classifier: bool,
        epochs: usize,
    ) -> Result<Self, RecipeError> {
        if epochs == 0 {
            return Err(RecipeError::InvalidStage(
                "epochs must be at least 1".into(),
            ));
        }
        if !(clean_sample_weight.is_finite() && clean_sample_weight > 0.0) {
            return Err(RecipeError::InvalidStage(format!(
                "clean_sample_weight must be positive, got {clean_sample_weight}"
            )));
        }
        Ok(Self {
            dataset_view,
            clean_sample_weight,
            reinit_classifier,
            epochs,
        })
    }
}

/// Clean → transfer to noisy with a fresh classifier → noisy with clean
/// samples weighted twice.
pub fn default_stages(epochs: usize) -> Vec<RecipeStage> {
    let epochs = epochs.max(1);
    vec![
        RecipeStage::new(DatasetView::CleanOnly, 1.0, false, epochs).unwrap(),
        RecipeStage::new(DatasetView::FullNoisy, 1.0, true, epochs).unwrap(),
        RecipeStage::new(DatasetView::FullNoisy, 2.0, false, epochs).unwrap(),
    ]
}

/// Training material shared by every stage.
#[derive(Debug, Clone, PartialEq)]
pub struct RecipeData {
    pub train: LabeledEmbeddings,
    pub val: LabeledEmbeddings,
    pub num_classes: usize,
    pub clean_classes: usize,
}

impl RecipeData {
    /// Samples and class count seen by a stage.
    pub fn view(&self, stage: &RecipeStage) -> Result<(LabeledEmbeddings, usize), RecipeError> {
        let (rows, classes) = match stage.dataset_view {
            DatasetView::CleanOnly => (self.train.clean_only(), self.clean_classes),
            DatasetView::FullNoisy => (self.train.clone(), self.num_classes),
        };
        Ok((rows.with_clean_weight(stage.clean_sample_weight)?, classes))
    }
}

/// Hyper-parameters fixed across stages.
#[derive(Debug, Clone, PartialEq)]
pub struct RecipeOptions {
    pub emb_dim: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for RecipeOptions {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            emb_dim: 512,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: RecipeStage,
    pub num_classes: usize,
    /// Head at epoch 0 of this stage.
    pub initial_head: CosineHead<f32>,
    pub result: TrainOutcome<f32>,
}

/// splitmix64 of `base` advanced by `stream`; used to derive independent
/// sub-seeds from one user seed.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const INIT_STREAM: u64 = 0;

fn reinit_stream(stage_index: usize) -> u64 {
    2 * stage_index as u64 + 1
}

fn train_stream(stage_index: usize) -> u64 {
    2 * stage_index as u64 + 2
}

/// Runs stage `stage_index` (0-based) starting from `previous`, or from a
/// fresh head when there is none.
pub fn run_stage(
    previous: Option<&CosineHead<f32>>,
    data: &RecipeData,
    stage: &RecipeStage,
    options: &RecipeOptions,
    stage_index: usize,
) -> Result<StageOutcome, RecipeError> {
    let (rows, classes) = data.view(stage)?;
    if rows.is_empty() {
        return Err(RecipeError::EmptyView {
            stage: stage_index + 1,
            view: stage.dataset_view,
        });
    }
    let initial_head = match previous {
        None => CosineHead::init(
            data.train.d_in(),
            options.emb_dim,
            classes,
            derive_seed(options.seed, INIT_STREAM),
        )?,
        Some(prev) if stage.reinit_classifier => prev.reinit_classifier(
            classes,
            derive_seed(options.seed, reinit_stream(stage_index)),
        )?,
        Some(prev) if prev.num_classes() != classes => {
            return Err(RecipeError::ClassCountMismatch {
                stage: stage_index + 1,
                head: prev.num_classes(),
                view: stage.dataset_view,
                view_classes: classes,
            })
        }
        Some(prev) => prev.clone(),
    };
    let config = TrainConfig {
        learning_rate: options.learning_rate,
        momentum: options.momentum,
        weight_decay: options.weight_decay,
        batch_size: options.batch_size,
        epochs: stage.epochs,
        seed: derive_seed(options.seed, train_stream(stage_index)),
    };
    let result = train(initial_head.clone(), &rows, &data.val, &config)?;
    Ok(StageOutcome {
        stage: *stage,
        num_classes: classes,
        initial_head,
        result,
    })
}

/// Runs every stage in order, carrying the head between stages.
pub fn run_recipe(
    data: &RecipeData,
    stages: &[RecipeStage],
    options: &RecipeOptions,
) -> Result<Vec<StageOutcome>, RecipeError> {
    let mut outcomes: Vec<StageOutcome> = Vec::with_capacity(stages.len());
    for (i, stage) in stages.iter().enumerate() {
        let previous = outcomes.last().map(|o| &o.result.head);
        let outcome = run_stage(previous, data, stage, options, i)?;
        outcomes.push(outcome);
    }
    Ok(outcomes)
}

/// Embeds query and index features with `head`, runs the k = 100 lookup and
/// scores it.
pub fn retrieval_map(
    head: &CosineHead<f32>,
    query_features: &EmbeddingSet,
    index_features: &EmbeddingSet,
    truth: &GroundTruth,
) -> Result<f64, RecipeError> {
    let queries = embed_set(head, query_features)?;
    let index = embed_set(head, index_features)?;
    let lists = top_k_search(&queries, &index, MAP_CUTOFF)?;
    let predictions = RankedPredictions::from_neighbors(&lists)?;
    Ok(mean_ap_at_100(&predictions, truth)?)
}
