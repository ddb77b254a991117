//! Decoding-based evaluation, the hallucination-model ablation and the
//! feature scatter export.

mod ablate;
mod features;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{beam_search, compose_input, BeamParams, Checkpoint, SegmentComposition, Transformer, TransformerStep};
use crate::scalar::Scalar;
use crate::synthdata::{AnswerSource, Corpus, DialogueExample, Split, UNKNOWN_ANSWERS};
use crate::textproc::{
    bleu, hallucination_report, rouge_l, tokenize, BleuStats, HallucinationReport, Vocabulary, BOS, EOS, INCORRECT_THRESHOLD,
    PAD, SEP, UNK,
};
use crate::training::write_atomic;

pub use ablate::{ablate_hlm, run_id_for, run_tham, AblationRow, ThamRun};
pub use features::{dump_features, pearson, FeatureDump, FeatureRow, DEFAULT_FEATURE_SAMPLES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub beam: BeamParams,
    pub split: Split,
    /// Evaluate only the first `n` examples of the split.
    pub max_examples: Option<usize>,
    pub feature_samples: usize,
    pub feature_coordinate: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            beam: BeamParams::default(),
            split: Split::Test,
            max_examples: None,
            feature_samples: DEFAULT_FEATURE_SAMPLES,
            feature_coordinate: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| {
            Err(Error::Config {
                key: format!("eval.{key}"),
                message: message.into(),
            })
        };
        if self.beam.beam == 0 {
            return bad("beam.beam", "must be at least 1");
        }
        if self.beam.max_len == 0 {
            return bad("beam.max_len", "must be at least 1");
        }
        if !self.beam.length_penalty.is_finite() {
            return bad("beam.length_penalty", "must be finite");
        }
        if self.feature_samples == 0 {
            return bad("feature_samples", "must be at least 1");
        }
        Ok(())
    }

    pub fn examples(&self, corpus: &Corpus) -> Vec<DialogueExample> {
        let mut ex = corpus.split(self.split);
        if let Some(n) = self.max_examples {
            ex.truncate(n);
        }
        ex
    }
}

/// Something that answers a dialogue question with a token sequence.
pub trait Responder {
    fn respond(&self, example: &DialogueExample) -> Result<Vec<String>>;
}

/// Replays the ground-truth answer.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleResponder;

impl Responder for OracleResponder {
    fn respond(&self, example: &DialogueExample) -> Result<Vec<String>> {
        Ok(example.answer.clone())
    }
}

/// Always gives the same answer.
#[derive(Debug, Clone)]
pub struct FixedResponder(pub Vec<String>);

impl Responder for FixedResponder {
    fn respond(&self, _: &DialogueExample) -> Result<Vec<String>> {
        Ok(self.0.clone())
    }
}

/// Beam-decodes a trained model on its own input composition.
pub struct ModelResponder<'a, S: Scalar> {
    pub model: &'a Transformer<S>,
    pub vocab: &'a Vocabulary,
    pub composition: &'a SegmentComposition,
    pub corpus: &'a Corpus,
    pub beam: BeamParams,
}

/// Tokens the decoder may never emit.
pub const FORBIDDEN: [usize; 4] = [PAD, BOS, UNK, SEP];

impl<S: Scalar> Responder for ModelResponder<'_, S> {
    fn respond(&self, example: &DialogueExample) -> Result<Vec<String>> {
        let video = if self.composition.contains(crate::model::Segment::Video) {
            Some(self.corpus.video(&example.video_id)?)
        } else {
            None
        };
        let (prefix, _) = compose_input(example, video, self.vocab, self.composition, 1)?;
        let room = self.model.config.max_positions.saturating_sub(prefix.len());
        if room == 0 {
            return Err(Error::arg(format!(
                "example `{}` leaves no room to decode within max_positions",
                example.example_id
            )));
        }
        let params = BeamParams {
            max_len: self.beam.max_len.min(room + 1),
            ..self.beam
        };
        let (cache, h) = self.model.prefill(&prefix)?;
        let init = (cache, h.row(h.rows() - 1).to_vec());
        let ids = beam_search(&TransformerStep { model: self.model }, init, EOS, &FORBIDDEN, &params);
        Ok(self.vocab.decode(&ids))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassCounts {
    pub video_only: usize,
    pub text_copyable: usize,
    pub unanswerable: usize,
    pub unlabeled: usize,
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.video_only + self.text_copyable + self.unanswerable + self.unlabeled
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub n_examples: usize,
    /// Corpus BLEU-1 to BLEU-4.
    pub bleu: [f64; 4],
    /// Mean sentence ROUGE-L.
    pub rouge_l: f64,
    pub copy_rate: Option<f64>,
    /// Share of video-only questions whose answer contains the gold key token.
    pub video_only_accuracy: Option<f64>,
    /// Share of unanswerable questions answered with a fixed "unknown" reply.
    pub unanswerable_rate: Option<f64>,
    pub class_counts: ClassCounts,
    /// Per-class share of predictions with sentence BLEU-4 at or above the
    /// incorrectness threshold.
    pub class_correct: BTreeMap<String, f64>,
    pub hallucination: HallucinationReport,
}

impl MetricRecord {
    /// Mean BLEU-1 between the incorrect predictions and the dialogue history.
    pub fn incorrect_history_bleu1(&self) -> Option<f64> {
        self.hallucination.incorrect_prediction.history.bleu1
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }
}

fn share(hits: usize, n: usize) -> Option<f64> {
    (n > 0).then(|| hits as f64 / n as f64)
}

/// Scores `predictions` aligned 1:1 with `examples`.
pub fn score_predictions<P: AsRef<[String]>>(predictions: &[P], examples: &[DialogueExample]) -> Result<MetricRecord> {
    if predictions.len() != examples.len() {
        return Err(Error::arg(format!(
            "{} predictions for {} examples",
            predictions.len(),
            examples.len()
        )));
    }
    let unknown: Vec<Vec<String>> = UNKNOWN_ANSWERS.iter().map(|s| tokenize(s)).collect();
    let mut stats: Option<BleuStats> = None;
    let mut rouge = 0.0;
    let mut counts = ClassCounts::default();
    let (mut vo_hits, mut un_hits) = (0usize, 0usize);
    let mut correct: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (p, e) in predictions.iter().zip(examples) {
        let p = p.as_ref();
        let refs = e.references();
        let s = BleuStats::new(p, &refs, 4);
        match &mut stats {
            Some(acc) => acc.merge(&s),
            None => stats = Some(s),
        }
        rouge += rouge_l(p, &refs);
        let class = e.answerable_from.map_or("unlabeled", AnswerSource::name);
        let slot = correct.entry(class).or_default();
        slot.0 += (bleu(p, &refs, 4) >= INCORRECT_THRESHOLD) as usize;
        slot.1 += 1;
        match e.answerable_from {
            Some(AnswerSource::VideoOnly) => {
                counts.video_only += 1;
                if e.key_token.as_ref().is_some_and(|k| p.contains(k)) {
                    vo_hits += 1;
                }
            }
            Some(AnswerSource::TextCopyable) => counts.text_copyable += 1,
            Some(AnswerSource::Unanswerable) => {
                counts.unanswerable += 1;
                if unknown.iter().any(|u| u.as_slice() == p) {
                    un_hits += 1;
                }
            }
            None => counts.unlabeled += 1,
        }
    }
    let n = examples.len();
    let bleu = match &stats {
        Some(s) => std::array::from_fn(|i| {
            let mut t = s.clone();
            t.matches.truncate(i + 1);
            t.totals.truncate(i + 1);
            t.score()
        }),
        None => [0.0; 4],
    };
    let hallucination = hallucination_report(predictions, examples, INCORRECT_THRESHOLD)?;
    Ok(MetricRecord {
        n_examples: n,
        bleu,
        rouge_l: if n > 0 { rouge / n as f64 } else { 0.0 },
        copy_rate: hallucination.copy_rate,
        video_only_accuracy: share(vo_hits, counts.video_only),
        unanswerable_rate: share(un_hits, counts.unanswerable),
        class_counts: counts,
        class_correct: correct
            .into_iter()
            .map(|(k, (h, n))| (k.to_string(), h as f64 / n as f64))
            .collect(),
        hallucination,
    })
}

/// Runs `responder` over `examples` and scores the answers.
pub fn evaluate<R: Responder + ?Sized>(
    responder: &R,
    examples: &[DialogueExample],
) -> Result<(MetricRecord, Vec<Vec<String>>)> {
    let predictions: Vec<Vec<String>> = examples.iter().map(|e| responder.respond(e)).collect::<Result<_>>()?;
    Ok((score_predictions(&predictions, examples)?, predictions))
}

/// Evaluates a checkpoint on `cfg.split` of `corpus`. The checkpoint's
/// vocabulary must be the one built from the corpus training split.
pub fn evaluate_checkpoint<S: Scalar>(
    ck: &Checkpoint,
    corpus: &Corpus,
    cfg: &EvalConfig,
) -> Result<(MetricRecord, Vec<Vec<String>>)> {
    cfg.validate()?;
    let task = crate::training::Task::new(corpus)?;
    ck.verify_vocab(&task.vocab)?;
    let model: Transformer<S> = ck.to_model()?;
    let responder = ModelResponder {
        model: &model,
        vocab: &ck.vocab,
        composition: &ck.composition,
        corpus,
        beam: cfg.beam,
    };
    evaluate(&responder, &cfg.examples(corpus))
}
