//! Copy diagnostics: how similar predictions and ground-truth answers are to
//! each input text, overall and on the predictions judged incorrect.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{bleu, shares_ngram};
use super::tokenize::{detokenize, tokenize};
use crate::error::{Error, Result};
use crate::synthdata::DialogueExample;

/// Predictions with BLEU-4 against the references below this are incorrect.
pub const INCORRECT_THRESHOLD: f64 = 0.1;
/// Minimum shared n-gram length that counts as a copy.
pub const COPY_NGRAM: usize = 3;

const SOURCES: [&str; 3] = ["caption", "history", "question"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub example_id: String,
    pub prediction: String,
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_predictions(records: &[PredictionRecord], path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(records)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Orders tokenized predictions to match `examples` by id.
pub fn align_predictions(records: &[PredictionRecord], examples: &[DialogueExample]) -> Result<Vec<Vec<String>>> {
    let by_id: HashMap<&str, &str> = records
        .iter()
        .map(|r| (r.example_id.as_str(), r.prediction.as_str()))
        .collect();
    examples
        .iter()
        .map(|e| {
            by_id
                .get(e.example_id.as_str())
                .map(|p| tokenize(p))
                .ok_or_else(|| Error::arg(format!("no prediction for example `{}`", e.example_id)))
        })
        .collect()
}

/// BLEU-1 and BLEU-4 of one sentence against one input source; `None` when
/// the source is empty for that example.
pub type SourcePair = Option<(f64, f64)>;

/// Per-example values that the report averages.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemScores {
    pub correctness: f64,
    pub prediction: [SourcePair; 3],
    pub ground_truth: [SourcePair; 3],
    pub prediction_copies: bool,
    pub ground_truth_copies: bool,
}

fn sources(ex: &DialogueExample) -> [Vec<&[String]>; 3] {
    let caption = if ex.caption.is_empty() { vec![] } else { vec![ex.caption.as_slice()] };
    let history = ex.history_sentences().into_iter().filter(|s| !s.is_empty()).collect();
    let question = if ex.question.is_empty() { vec![] } else { vec![ex.question.as_slice()] };
    [caption, history, question]
}

fn score_against(sentence: &[String], srcs: &[Vec<&[String]>; 3]) -> [SourcePair; 3] {
    std::array::from_fn(|i| (!srcs[i].is_empty()).then(|| (bleu(sentence, &srcs[i], 1), bleu(sentence, &srcs[i], 4))))
}

fn copies(sentence: &[String], srcs: &[Vec<&[String]>; 3]) -> bool {
    srcs.iter().flatten().any(|s| shares_ngram(sentence, s, COPY_NGRAM))
}

impl ItemScores {
    pub fn compute(prediction: &[String], example: &DialogueExample) -> Self {
        let srcs = sources(example);
        Self {
            correctness: bleu(prediction, &example.references(), 4),
            prediction: score_against(prediction, &srcs),
            ground_truth: score_against(&example.answer, &srcs),
            prediction_copies: copies(prediction, &srcs),
            ground_truth_copies: copies(&example.answer, &srcs),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceScores {
    pub bleu1: Option<f64>,
    pub bleu4: Option<f64>,
    /// Items that had this source.
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityBlock {
    pub caption: SourceScores,
    pub history: SourceScores,
    pub question: SourceScores,
}

impl SimilarityBlock {
    fn from_pairs<'a>(items: impl Iterator<Item = &'a [SourcePair; 3]> + Clone) -> Self {
        let col = |i: usize| {
            let vals: Vec<(f64, f64)> = items.clone().filter_map(|p| p[i]).collect();
            let n = vals.len();
            let mean = |f: fn(&(f64, f64)) -> f64| (n > 0).then(|| vals.iter().map(f).sum::<f64>() / n as f64);
            SourceScores {
                bleu1: mean(|v| v.0),
                bleu4: mean(|v| v.1),
                count: n,
            }
        };
        Self {
            caption: col(0),
            history: col(1),
            question: col(2),
        }
    }

    fn get(&self, source: &str) -> &SourceScores {
        match source {
            "caption" => &self.caption,
            "history" => &self.history,
            _ => &self.question,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HallucinationReport {
    pub threshold: f64,
    pub n_examples: usize,
    pub n_incorrect: usize,
    pub prediction: SimilarityBlock,
    pub ground_truth: SimilarityBlock,
    pub incorrect_prediction: SimilarityBlock,
    pub incorrect_ground_truth: SimilarityBlock,
    pub copy_rate: Option<f64>,
    pub incorrect_copy_rate: Option<f64>,
    pub ground_truth_copy_rate: Option<f64>,
}

fn rate<'a>(flags: impl Iterator<Item = &'a bool>) -> Option<f64> {
    let (mut n, mut k) = (0usize, 0usize);
    for &f in flags {
        n += 1;
        k += f as usize;
    }
    (n > 0).then(|| k as f64 / n as f64)
}

impl HallucinationReport {
    pub fn from_items(items: &[ItemScores], threshold: f64) -> Self {
        let incorrect: Vec<&ItemScores> = items.iter().filter(|s| s.correctness < threshold).collect();
        Self {
            threshold,
            n_examples: items.len(),
            n_incorrect: incorrect.len(),
            prediction: SimilarityBlock::from_pairs(items.iter().map(|s| &s.prediction)),
            ground_truth: SimilarityBlock::from_pairs(items.iter().map(|s| &s.ground_truth)),
            incorrect_prediction: SimilarityBlock::from_pairs(incorrect.iter().map(|s| &s.prediction)),
            incorrect_ground_truth: SimilarityBlock::from_pairs(incorrect.iter().map(|s| &s.ground_truth)),
            copy_rate: rate(items.iter().map(|s| &s.prediction_copies)),
            incorrect_copy_rate: rate(incorrect.iter().map(|s| &s.prediction_copies)),
            ground_truth_copy_rate: rate(items.iter().map(|s| &s.ground_truth_copies)),
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Long-format rows `subset, side, metric, value, count`; undefined
    /// values are left empty.
    pub fn csv_rows(&self) -> Vec<[String; 5]> {
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut rows = Vec::new();
        let blocks = [
            ("all", "prediction", &self.prediction),
            ("all", "ground_truth", &self.ground_truth),
            ("incorrect", "prediction", &self.incorrect_prediction),
            ("incorrect", "ground_truth", &self.incorrect_ground_truth),
        ];
        for (subset, side, block) in blocks {
            for src in SOURCES {
                let s = block.get(src);
                for (order, v) in [("bleu1", s.bleu1), ("bleu4", s.bleu4)] {
                    rows.push([subset.into(), side.into(), format!("{src}_{order}"), fmt(v), s.count.to_string()]);
                }
            }
        }
        let n = self.n_examples.to_string();
        rows.push(["all".into(), "prediction".into(), "copy_rate".into(), fmt(self.copy_rate), n.clone()]);
        rows.push([
            "incorrect".into(),
            "prediction".into(),
            "copy_rate".into(),
            fmt(self.incorrect_copy_rate),
            self.n_incorrect.to_string(),
        ]);
        rows.push(["all".into(), "ground_truth".into(), "copy_rate".into(), fmt(self.ground_truth_copy_rate), n]);
        rows
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["subset", "side", "metric", "value", "count"])?;
        for r in self.csv_rows() {
            w.write_record(&r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Builds the report for `predictions` aligned 1:1 with `examples`.
pub fn hallucination_report<P: AsRef<[String]>>(
    predictions: &[P],
    examples: &[DialogueExample],
    threshold: f64,
) -> Result<HallucinationReport> {
    if predictions.len() != examples.len() {
        return Err(Error::arg(format!(
            "{} predictions for {} examples",
            predictions.len(),
            examples.len()
        )));
    }
    let items: Vec<ItemScores> = predictions
        .iter()
        .zip(examples)
        .map(|(p, e)| ItemScores::compute(p.as_ref(), e))
        .collect();
    Ok(HallucinationReport::from_items(&items, threshold))
}

/// Predictions as records keyed by example id.
pub fn prediction_records<P: AsRef<[String]>>(predictions: &[P], examples: &[DialogueExample]) -> Vec<PredictionRecord> {
    predictions
        .iter()
        .zip(examples)
        .map(|(p, e)| PredictionRecord {
            example_id: e.example_id.clone(),
            prediction: detokenize(p.as_ref()),
        })
        .collect()
}
