//! Metric formulas, case-level voting, coarse collapse, fold ensembling, statistics
//! and the summary tables built from prediction dumps.
//!
//! Case-level scores cover the five tumor classes only: background cases are
//! skipped and votes are taken among tumor classes, so a case is never diagnosed as
//! background.

mod metrics;
mod stats;
mod voting;

pub use metrics::{compute_metrics, ClassMetrics, ConfusionMatrix, MetricsReport};
pub use stats::{
    confidence_interval, paired_t_test, MeanCi, StatTestResult, SIGNIFICANCE_LEVEL, Z_95,
};
pub use voting::{
    coarse_vote_among, collapse_coarse, ensemble_predict, majority_vote, majority_vote_among, vote,
};

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cohort::{lookup_subtype, subtype_table, Case, CoarseLabel, FineLabel};
use crate::error::{Error, IoContext, Result};
use crate::util;

/// Fold marker on records produced by averaging all fold models.
pub const ENSEMBLE_FOLD: usize = usize::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub case_id: String,
    pub patch_id: String,
    pub fold: usize,
    #[serde(rename = "model")]
    pub model_id: String,
    pub probabilities: Vec<f64>,
}

pub fn write_predictions(records: &[PredictionRecord], path: &Path) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    util::write_atomic(path, out.as_bytes())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = std::fs::read_to_string(path).at(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let r: PredictionRecord = serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            if r.probabilities.len() != FineLabel::COUNT {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("expected 6 probabilities, got {}", r.probabilities.len()),
                });
            }
            Ok(r)
        })
        .collect()
}

/// Correct patch argmaxes over all patches. `truths` maps case id to label.
pub fn patch_accuracy(
    records: &[PredictionRecord],
    truths: &HashMap<String, FineLabel>,
) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("no patch predictions"));
    }
    let mut correct = 0usize;
    for r in records {
        let truth = truths
            .get(&r.case_id)
            .ok_or_else(|| Error::InvalidArgument(format!("no truth for case `{}`", r.case_id)))?;
        if util::argmax(&r.probabilities) == truth.index() {
            correct += 1;
        }
    }
    Ok(correct as f64 / records.len() as f64)
}

/// Patch accuracy after collapsing both prediction and truth to coarse classes.
pub fn coarse_patch_accuracy(
    records: &[PredictionRecord],
    truths: &HashMap<String, FineLabel>,
) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("no patch predictions"));
    }
    let mut correct = 0usize;
    for r in records {
        let truth = truths
            .get(&r.case_id)
            .ok_or_else(|| Error::InvalidArgument(format!("no truth for case `{}`", r.case_id)))?;
        if util::argmax(&collapse_coarse(&r.probabilities)) == truth.coarse().index() {
            correct += 1;
        }
    }
    Ok(correct as f64 / records.len() as f64)
}

/// Averages each (case, patch) prediction over folds.
pub fn ensemble_records(records: &[PredictionRecord]) -> Result<Vec<PredictionRecord>> {
    let mut groups: BTreeMap<(&str, &str), Vec<Vec<f64>>> = BTreeMap::new();
    let mut model = None;
    for r in records {
        groups
            .entry((&r.case_id, &r.patch_id))
            .or_default()
            .push(r.probabilities.clone());
        model.get_or_insert(r.model_id.as_str());
    }
    groups
        .into_iter()
        .map(|((case, patch), probs)| {
            Ok(PredictionRecord {
                case_id: case.to_string(),
                patch_id: patch.to_string(),
                fold: ENSEMBLE_FOLD,
                model_id: model.unwrap_or_default().to_string(),
                probabilities: ensemble_predict(&probs)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseOutcome {
    pub case_id: String,
    pub truth: FineLabel,
    pub fine: FineLabel,
    pub coarse: CoarseLabel,
    pub patches: usize,
}

/// Case- and patch-level scores for one set of predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub fine: MetricsReport,
    pub coarse: MetricsReport,
    pub fine_confusion: ConfusionMatrix,
    pub coarse_confusion: ConfusionMatrix,
    pub patch_accuracy_fine: f64,
    pub patch_accuracy_coarse: f64,
    pub cases: Vec<CaseOutcome>,
}

/// Votes each tumor case and scores the result at both granularities.
pub fn evaluate_cases(records: &[PredictionRecord], cases: &[Case]) -> Result<Evaluation> {
    let truths: HashMap<String, FineLabel> = cases
        .iter()
        .filter(|c| c.fine_label != FineLabel::B)
        .map(|c| (c.case_id.clone(), c.fine_label))
        .collect();
    let mut by_case: BTreeMap<&str, Vec<PredictionRecord>> = BTreeMap::new();
    let mut scored = Vec::new();
    for r in records {
        if truths.contains_key(&r.case_id) {
            by_case.entry(&r.case_id).or_default().push(r.clone());
            scored.push(r.clone());
        }
    }
    let mut fine_cm = ConfusionMatrix::new(&FineLabel::TUMOR);
    let mut coarse_cm = ConfusionMatrix::new(&CoarseLabel::TUMOR);
    let mut outcomes = Vec::new();
    for c in cases.iter().filter(|c| truths.contains_key(&c.case_id)) {
        let Some(preds) = by_case.get(c.case_id.as_str()) else {
            log::warn!("case {} has no predictions", c.case_id);
            continue;
        };
        let fine = majority_vote_among(preds, &FineLabel::TUMOR)?;
        let coarse = coarse_vote_among(preds, &CoarseLabel::TUMOR)?;
        fine_cm.add(c.fine_label.index(), fine.index());
        coarse_cm.add(c.fine_label.coarse().index(), coarse.index());
        outcomes.push(CaseOutcome {
            case_id: c.case_id.clone(),
            truth: c.fine_label,
            fine,
            coarse,
            patches: preds.len(),
        });
    }
    Ok(Evaluation {
        fine: compute_metrics(&fine_cm)?,
        coarse: compute_metrics(&coarse_cm)?,
        fine_confusion: fine_cm,
        coarse_confusion: coarse_cm,
        patch_accuracy_fine: patch_accuracy(&scored, &truths)?,
        patch_accuracy_coarse: coarse_patch_accuracy(&scored, &truths)?,
        cases: outcomes,
    })
}

/// One granularity of a dataset summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GranularitySummary {
    pub fold_macro_recall: Vec<f64>,
    pub fold_patch_accuracy: Vec<f64>,
    pub macro_recall: Option<MeanCi>,
    pub patch_accuracy: Option<MeanCi>,
    /// Macro recall of the pooled (local) or ensembled (external) predictions.
    pub pooled_macro_recall: f64,
    pub pooled_patch_accuracy: f64,
    pub correct: u64,
    pub total: u64,
    pub class_recall: BTreeMap<String, f64>,
}

impl GranularitySummary {
    pub fn overall_fraction(&self) -> String {
        format!("{}/{}", self.correct, self.total)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dataset {
    Local,
    External,
}

impl Dataset {
    pub fn as_str(self) -> &'static str {
        match self {
            Dataset::Local => "Local",
            Dataset::External => "External",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub model_id: String,
    pub dataset: Dataset,
    pub fine: GranularitySummary,
    pub coarse: GranularitySummary,
}

fn granularity(
    per_fold: &[Evaluation],
    overall: &Evaluation,
    coarse: bool,
) -> GranularitySummary {
    fn pick(e: &Evaluation, coarse: bool) -> &MetricsReport {
        if coarse {
            &e.coarse
        } else {
            &e.fine
        }
    }
    let pacc = |e: &Evaluation| {
        if coarse {
            e.patch_accuracy_coarse
        } else {
            e.patch_accuracy_fine
        }
    };
    let fold_macro_recall: Vec<f64> = per_fold.iter().map(|e| pick(e, coarse).macro_recall).collect();
    let fold_patch_accuracy: Vec<f64> = per_fold.iter().map(pacc).collect();
    let m = pick(overall, coarse);
    GranularitySummary {
        macro_recall: MeanCi::of(&fold_macro_recall).ok(),
        patch_accuracy: MeanCi::of(&fold_patch_accuracy).ok(),
        fold_macro_recall,
        fold_patch_accuracy,
        pooled_macro_recall: m.macro_recall,
        pooled_patch_accuracy: pacc(overall),
        correct: m.correct,
        total: m.total,
        class_recall: m
            .per_class
            .iter()
            .filter(|c| c.support > 0)
            .map(|c| (c.class.clone(), c.recall))
            .collect(),
    }
}

fn split_by_fold(records: &[PredictionRecord]) -> BTreeMap<usize, Vec<PredictionRecord>> {
    let mut m: BTreeMap<usize, Vec<PredictionRecord>> = BTreeMap::new();
    for r in records {
        m.entry(r.fold).or_default().push(r.clone());
    }
    m
}

/// Cross-validation summary: per-fold scores for the intervals, overall accuracy
/// from all validation folds pooled.
pub fn summarize_local(model_id: &str, records: &[PredictionRecord], cases: &[Case]) -> Result<DatasetSummary> {
    let per_fold = split_by_fold(records)
        .values()
        .map(|r| evaluate_cases(r, cases))
        .collect::<Result<Vec<_>>>()?;
    let pooled = evaluate_cases(records, cases)?;
    Ok(DatasetSummary {
        model_id: model_id.to_string(),
        dataset: Dataset::Local,
        fine: granularity(&per_fold, &pooled, false),
        coarse: granularity(&per_fold, &pooled, true),
    })
}

/// External-set summary: each fold model scored on the whole set for the intervals,
/// overall accuracy from the fold-averaged probabilities.
pub fn summarize_external(model_id: &str, records: &[PredictionRecord], cases: &[Case]) -> Result<DatasetSummary> {
    let per_fold = split_by_fold(records)
        .values()
        .map(|r| evaluate_cases(r, cases))
        .collect::<Result<Vec<_>>>()?;
    let ensembled = evaluate_cases(&ensemble_records(records)?, cases)?;
    Ok(DatasetSummary {
        model_id: model_id.to_string(),
        dataset: Dataset::External,
        fine: granularity(&per_fold, &ensembled, false),
        coarse: granularity(&per_fold, &ensembled, true),
    })
}

fn ci_cell(ci: &Option<MeanCi>, fallback: f64) -> String {
    match ci {
        Some(c) => c.to_string(),
        None => format!("{fallback:.2}"),
    }
}

/// Markdown table with one row per (dataset, model), fine then coarse columns.
pub fn render_summary_table(rows: &[DatasetSummary]) -> String {
    let mut out = String::from(
        "| Dataset | Model | Fine Macro Recall | Fine Patch Acc. | Fine Overall Acc. | Coarse Macro Recall | Coarse Patch Acc. | Coarse Overall Acc. |\n\
         |---|---|---|---|---|---|---|---|\n",
    );
    for r in rows {
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} | {} |\n",
            r.dataset.as_str(),
            r.model_id,
            ci_cell(&r.fine.macro_recall, r.fine.pooled_macro_recall),
            ci_cell(&r.fine.patch_accuracy, r.fine.pooled_patch_accuracy),
            r.fine.overall_fraction(),
            ci_cell(&r.coarse.macro_recall, r.coarse.pooled_macro_recall),
            ci_cell(&r.coarse.patch_accuracy, r.coarse.pooled_patch_accuracy),
            r.coarse.overall_fraction(),
        ));
    }
    out
}

/// Confusion counts with molecular-subtype rows and predicted tumor-class columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubtypeConfusion {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl SubtypeConfusion {
    pub fn get(&self, row: &str, col: FineLabel) -> Option<u64> {
        let i = self.rows.iter().position(|r| r == row)?;
        let j = self.cols.iter().position(|c| c == col.as_str())?;
        Some(self.counts[i][j])
    }

    pub fn col_sum(&self, col: FineLabel) -> u64 {
        let j = FineLabel::TUMOR
            .iter()
            .position(|c| *c == col)
            .expect("tumor class");
        self.counts.iter().map(|r| r[j]).sum()
    }
}

/// Row groups in table order (GBM/AA/DA IDH−, GBM/AA/DA IDH+, AO, O, M, L).
pub fn subtype_groups() -> Vec<String> {
    let mut groups: Vec<String> = Vec::new();
    for e in subtype_table() {
        if !groups.contains(&e.group) {
            groups.push(e.group.clone());
        }
    }
    groups
}

/// Votes each external case on its fold-averaged predictions and tallies the
/// predicted class against the case's subtype group.
pub fn expanded_confusion(records: &[PredictionRecord], cases: &[Case]) -> Result<SubtypeConfusion> {
    let rows = subtype_groups();
    let cols: Vec<String> = FineLabel::TUMOR.iter().map(|c| c.to_string()).collect();
    let mut counts = vec![vec![0u64; cols.len()]; rows.len()];
    let ens = ensemble_records(records)?;
    let mut by_case: BTreeMap<&str, Vec<PredictionRecord>> = BTreeMap::new();
    for r in &ens {
        by_case.entry(&r.case_id).or_default().push(r.clone());
    }
    for c in cases {
        let Some(subtype) = &c.subtype else { continue };
        let entry = lookup_subtype(subtype)?;
        let Some(preds) = by_case.get(c.case_id.as_str()) else {
            log::warn!("case {} has no predictions", c.case_id);
            continue;
        };
        let predicted = majority_vote_among(preds, &FineLabel::TUMOR)?;
        let i = rows.iter().position(|r| *r == entry.group).expect("group row");
        let j = FineLabel::TUMOR
            .iter()
            .position(|l| *l == predicted)
            .expect("tumor class");
        counts[i][j] += 1;
    }
    Ok(SubtypeConfusion { rows, cols, counts })
}
