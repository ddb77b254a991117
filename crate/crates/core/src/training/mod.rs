//! Two-stage training: independent cross-entropy training of the response,
//! hallucination and pure language models, then minimax regularization of the
//! response model against the hallucination signal.

mod stage1;
mod stage2;
mod thr;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mine::StatNetConfig;
use crate::model::{compose_full, ComposedInput, ModelConfig, PackedBatch, SegmentComposition, Transformer};
use crate::params::{Adam, AdamConfig, TensorRecord};
use crate::scalar::Scalar;
use crate::synthdata::{Corpus, DialogueExample, Split};
use crate::textproc::Vocabulary;

pub use stage1::{train_stage1, Stage1Outcome};
pub use stage2::{train_stage2, Stage2Outcome};
pub use thr::{pure_h_features, thr_graph, thr_loss};

/// How stage 2 builds the signal the response model is decorrelated from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage2Mode {
    /// `G = F* − F†`.
    Thr,
    /// `G = F*`, without removing the pure language model's features.
    NoSubtraction,
    /// Cross-entropy only, on the same epoch, step and seed schedule.
    CeContinuation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeepCheckpoints {
    All,
    Best,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    /// Stage-2 peak learning rate for `θ`; `peak_lr` when unset.
    pub stage2_peak_lr: Option<f64>,
    /// Stage-2 warmup for `θ`; `warmup_steps` when unset.
    pub stage2_warmup_steps: Option<usize>,
    pub alpha: f64,
    pub hlm_variant: SegmentComposition,
    pub mode: Stage2Mode,
    pub ema_rate: f64,
    pub mine_lr: f64,
    pub mine: StatNetConfig,
    pub adam: AdamConfig,
    pub eval_batch_size: usize,
    pub keep_checkpoints: KeepCheckpoints,
    /// Checkpoint root; the run directory when unset.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 8,
            peak_lr: 3e-4,
            warmup_steps: 200,
            epochs_stage1: 20,
            epochs_stage2: 10,
            stage2_peak_lr: None,
            stage2_warmup_steps: None,
            alpha: 0.01,
            hlm_variant: SegmentComposition::history_only(),
            mode: Stage2Mode::Thr,
            ema_rate: 0.01,
            mine_lr: 1e-3,
            mine: StatNetConfig::default(),
            adam: AdamConfig::default(),
            eval_batch_size: 32,
            keep_checkpoints: KeepCheckpoints::All,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    /// Values from the original training recipe.
    pub fn paper() -> Self {
        Self {
            batch_size: 8,
            peak_lr: 6.25e-4,
            warmup_steps: 10_000,
            epochs_stage1: 20,
            epochs_stage2: 20,
            alpha: 0.01,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| {
            Err(Error::Config {
                key: format!("train.{key}"),
                message,
            })
        };
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha", format!("{} must be a finite non-negative number", self.alpha));
        }
        if self.batch_size < 2 {
            return bad("batch_size", "must be at least 2 so the estimator sees pairs".into());
        }
        if self.eval_batch_size == 0 {
            return bad("eval_batch_size", "must be positive".into());
        }
        for (k, v) in [
            ("peak_lr", Some(self.peak_lr)),
            ("stage2_peak_lr", self.stage2_peak_lr),
            ("mine_lr", Some(self.mine_lr)),
        ] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return bad(k, format!("{v} must be positive"));
                }
            }
        }
        if !(self.ema_rate > 0.0 && self.ema_rate <= 1.0) {
            return bad("ema_rate", format!("{} not in (0, 1]", self.ema_rate));
        }
        if self.epochs_stage1 == 0 {
            return bad("epochs_stage1", "must be positive".into());
        }
        Ok(())
    }

    pub fn theta_lr_stage2(&self) -> f64 {
        self.stage2_peak_lr.unwrap_or(self.peak_lr)
    }

    pub fn warmup_stage2(&self) -> usize {
        self.stage2_warmup_steps.unwrap_or(self.warmup_steps)
    }
}

/// Piecewise-linear learning rate: `0 → peak` over `warmup` updates, then
/// `peak → 0` at update `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: u64,
    pub total: u64,
}

impl LrSchedule {
    pub fn new(peak: f64, warmup: usize, total: usize, key: &str) -> Result<Self> {
        if warmup > total {
            return Err(Error::Config {
                key: key.into(),
                message: format!("warmup of {warmup} steps exceeds the {total} total steps"),
            });
        }
        Ok(Self {
            peak,
            warmup: warmup as u64,
            total: total as u64,
        })
    }

    /// Rate for the `step`-th update (1-based).
    pub fn at(&self, step: u64) -> f64 {
        if step <= self.warmup {
            return self.peak * step as f64 / self.warmup as f64;
        }
        if step >= self.total {
            return 0.0;
        }
        self.peak * (self.total - step) as f64 / (self.total - self.warmup) as f64
    }

    /// Share of the peak left by the decay after `step`: 1 through warmup,
    /// 0 at the end.
    pub fn decay_factor(&self, step: u64) -> f64 {
        if step <= self.warmup {
            1.0
        } else {
            self.at(step) / self.peak
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Theta,
    Phi,
}

/// One metric-log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    pub phase: Option<Phase>,
    pub l_rlm: Option<f64>,
    pub l_hlm: Option<f64>,
    pub l_lm: Option<f64>,
    pub l_thr: Option<f64>,
    pub lr: f64,
    pub val_ce: Option<f64>,
    pub val_hlm: Option<f64>,
    pub val_lm: Option<f64>,
    pub val_thr: Option<f64>,
    /// Response-model parameter hash after the epoch.
    pub param_hash: String,
    pub phi_hash: Option<String>,
}

/// Optimizer and selection state of one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub name: String,
    pub params: Vec<TensorRecord>,
    pub adam: Adam,
    pub step: u64,
    pub best_epoch: Option<usize>,
    pub best_val: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiState {
    pub params: Vec<TensorRecord>,
    pub adam: Adam,
    pub log_ema: Option<f64>,
}

/// Everything needed to continue a stage after its last finished epoch.
/// Random streams are derived from the seed and epoch, so no generator state
/// is stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunState {
    pub stage: u8,
    pub fingerprint: String,
    pub seed: u64,
    pub epoch: usize,
    pub models: Vec<ModelState>,
    pub phi: Option<PhiState>,
    pub history: Vec<EpochRecord>,
}

impl RunState {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Interruption and resumption controls.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunControl {
    /// Continue from the saved state when one exists.
    pub resume: bool,
    /// Stop after this epoch, leaving a resumable state behind.
    pub stop_after: Option<usize>,
}

/// Layout of one run's artifacts.
#[derive(Debug, Clone, PartialEq)]
pub struct RunDir {
    pub root: PathBuf,
    pub checkpoints: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>, checkpoint_dir: Option<&Path>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        let checkpoints = checkpoint_dir.map_or_else(|| root.clone(), Path::to_path_buf);
        Ok(Self { root, checkpoints })
    }

    /// `{root}/{model}/{epoch}.ckpt`
    pub fn checkpoint(&self, model: &str, epoch: usize) -> PathBuf {
        self.checkpoints.join(model).join(format!("{epoch}.ckpt"))
    }

    pub fn state(&self, stage: u8) -> PathBuf {
        self.root.join(format!("state_stage{stage}.json"))
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    /// Replaces this stage's lines in the metric log, keeping other stages.
    pub fn write_metrics(&self, stage: u8, history: &[EpochRecord]) -> Result<()> {
        let path = self.metrics();
        let mut keep: Vec<EpochRecord> = read_metrics(&path).unwrap_or_default();
        keep.retain(|r| r.stage != stage);
        keep.extend_from_slice(history);
        keep.sort_by_key(|r| (r.stage, r.epoch));
        let mut out = Vec::new();
        for r in &keep {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        }
        write_atomic(&path, &out)
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                index: i,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Train and validation examples with the training vocabulary.
#[derive(Debug, Clone)]
pub struct Task<'a> {
    pub corpus: &'a Corpus,
    pub vocab: Vocabulary,
    pub train: Vec<DialogueExample>,
    pub valid: Vec<DialogueExample>,
}

impl<'a> Task<'a> {
    /// Builds the vocabulary from the training split.
    pub fn new(corpus: &'a Corpus) -> Result<Self> {
        let train = corpus.split(Split::Train);
        let mut sentences: Vec<&[String]> = Vec::new();
        for e in &train {
            sentences.push(&e.caption);
            sentences.push(&e.question);
            sentences.push(&e.answer);
            sentences.extend(e.history_sentences());
            sentences.extend(e.extra_references.iter().map(Vec::as_slice));
        }
        let vocab = Vocabulary::build(sentences)?;
        Self::with_vocab(corpus, vocab)
    }

    pub fn with_vocab(corpus: &'a Corpus, vocab: Vocabulary) -> Result<Self> {
        let train = corpus.split(Split::Train);
        let valid = corpus.split(Split::Valid);
        if train.len() < 2 {
            return Err(Error::Integrity("training split needs at least two examples".into()));
        }
        if valid.is_empty() {
            return Err(Error::Integrity("validation split is empty".into()));
        }
        Ok(Self {
            corpus,
            vocab,
            train,
            valid,
        })
    }

    pub fn compose(&self, examples: &[DialogueExample], comp: &SegmentComposition) -> Result<Vec<ComposedInput>> {
        compose_all(self.corpus, &self.vocab, examples, comp)
    }

    /// `base` with the vocabulary size and channel widths of this task; fails
    /// when the longest full input does not fit.
    pub fn model_config(&self, base: &ModelConfig) -> Result<ModelConfig> {
        let mut cfg = base.clone();
        cfg.vocab_size = self.vocab.len();
        if let Some(w) = self.corpus.channel_widths() {
            cfg.channel_widths = w;
        }
        cfg.validate()?;
        let longest = self
            .compose(&self.train, &SegmentComposition::full())?
            .iter()
            .chain(self.compose(&self.valid, &SegmentComposition::full())?.iter())
            .map(ComposedInput::len)
            .max()
            .unwrap_or(0);
        if longest > cfg.max_positions {
            return Err(Error::Config {
                key: "model.max_positions".into(),
                message: format!("{} is shorter than the longest input ({longest})", cfg.max_positions),
            });
        }
        Ok(cfg)
    }
}

pub fn compose_all(
    corpus: &Corpus,
    vocab: &Vocabulary,
    examples: &[DialogueExample],
    comp: &SegmentComposition,
) -> Result<Vec<ComposedInput>> {
    examples
        .iter()
        .map(|e| {
            let video = if comp.contains(crate::model::Segment::Video) {
                Some(corpus.video(&e.video_id)?)
            } else {
                None
            };
            compose_full(e, video, vocab, comp)
        })
        .collect()
}

pub(crate) fn pack<S: Scalar>(inputs: &[ComposedInput], idx: &[usize], cfg: &ModelConfig) -> Result<PackedBatch<S>> {
    let sel: Vec<ComposedInput> = idx.iter().map(|&i| inputs[i].clone()).collect();
    PackedBatch::new(&sel, cfg.max_positions, cfg.video_width())
}

/// Stable digest of anything serializable.
pub(crate) fn fingerprint<T: Serialize>(v: &T) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(v)?)))
}

pub(crate) fn shuffled<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut o: Vec<usize> = (0..n).collect();
    o.shuffle(rng);
    o
}

/// Mean per-example cross-entropy over `inputs`, deterministic.
pub fn mean_ce<S: Scalar>(model: &Transformer<S>, inputs: &[ComposedInput], batch: usize) -> Result<f64> {
    let idx: Vec<usize> = (0..inputs.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(batch.max(1)) {
        let b = pack::<S>(inputs, chunk, &model.config)?;
        total += model.evaluate(&b).0 * chunk.len() as f64;
    }
    Ok(total / inputs.len() as f64)
}

/// Answer-position features of every input, stacked in order.
pub fn all_features<S: Scalar>(
    model: &Transformer<S>,
    inputs: &[ComposedInput],
    batch: usize,
) -> Result<crate::tensor::Matrix<S>> {
    let idx: Vec<usize> = (0..inputs.len()).collect();
    let mut parts = Vec::new();
    for chunk in idx.chunks(batch.max(1)) {
        let b = pack::<S>(inputs, chunk, &model.config)?;
        parts.push(model.features(&b));
    }
    let refs: Vec<&crate::tensor::Matrix<S>> = parts.iter().collect();
    Ok(crate::tensor::Matrix::vcat(&refs))
}

/// One cross-entropy epoch over `order`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn ce_epoch<S: Scalar, R: Rng>(
    model: &mut Transformer<S>,
    adam: &mut Adam,
    step: &mut u64,
    sched: &LrSchedule,
    inputs: &[ComposedInput],
    order: &[usize],
    batch: usize,
    dropout: &mut R,
    label: &str,
) -> Result<(f64, f64)> {
    let mut total = 0.0;
    let mut lr = 0.0;
    for chunk in order.chunks(batch) {
        let b = pack::<S>(inputs, chunk, &model.config)?;
        let mut g = crate::autograd::Graph::new();
        let rng = (model.config.dropout > 0.0).then_some(&mut *dropout);
        let (_, loss) = model.loss(&mut g, &b, true, rng);
        let lv = g.scalar(loss).as_f64();
        let grads = g.backward(loss, &model.params);
        if !lv.is_finite() || !grads.is_finite() {
            return Err(Error::Divergence(format!("{label}: non-finite loss {lv} at step {}", *step + 1)));
        }
        *step += 1;
        lr = sched.at(*step);
        adam.update(&mut model.params, &grads, lr);
        total += lv * chunk.len() as f64;
    }
    Ok((total / order.len() as f64, lr))
}
