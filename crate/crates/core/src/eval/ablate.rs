use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{evaluate_checkpoint, MetricRecord};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{Checkpoint, SegmentComposition};
use crate::scalar::Scalar;
use crate::synthdata::Corpus;
use crate::training::{train_stage1, train_stage2, RunControl, RunDir, Stage1Outcome, Stage2Outcome, Task};

/// Outcome of both training stages plus the evaluation of the final model.
#[derive(Debug, Clone)]
pub struct ThamRun {
    pub dir: PathBuf,
    pub stage1: Stage1Outcome,
    pub stage2: Stage2Outcome,
    pub metrics: MetricRecord,
}

/// Trains stage 1 and stage 2 under `dir` and evaluates the regularized
/// model. Metrics go to `dir/metrics_stage2.json`.
pub fn run_tham<S: Scalar>(cfg: &RunConfig, corpus: &Corpus, dir: &Path) -> Result<ThamRun> {
    cfg.validate()?;
    let task = Task::new(corpus)?;
    let run = RunDir::new(dir, cfg.train.checkpoint_dir.as_deref())?;
    let stage1 = train_stage1::<S>(&cfg.train, &cfg.model, &task, &run, RunControl::default())?;
    let load = |p: &Path| Checkpoint::load(p);
    let stage2 = train_stage2::<S>(
        &load(&stage1.rlm)?,
        &load(&stage1.hlm)?,
        &load(&stage1.lm)?,
        &cfg.train,
        &task,
        &run,
        RunControl::default(),
    )?;
    let (metrics, _) = evaluate_checkpoint::<S>(&load(&stage2.rlm)?, corpus, &cfg.eval)?;
    metrics.write_json(&dir.join("metrics_stage2.json"))?;
    Ok(ThamRun {
        dir: dir.to_path_buf(),
        stage1,
        stage2,
        metrics,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub run_id: String,
    pub seed: u64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub video_only_accuracy: Option<f64>,
    pub copy_rate: Option<f64>,
    pub best_val_ce: Option<f64>,
}

/// Run id of one ablation row.
pub fn run_id_for(base: &str, variant: &SegmentComposition, seed: u64) -> String {
    format!("{base}-{}-s{seed}", variant.name())
}

/// Full two-stage run per hallucination-model variant, all with the seed of
/// `cfg`, each in `out_root/{run_id}`. Rows are also written to
/// `out_root/{cfg.run_id}-ablation.csv`.
pub fn ablate_hlm<S: Scalar>(
    variants: &[SegmentComposition],
    cfg: &RunConfig,
    corpus: &Corpus,
    out_root: &Path,
) -> Result<Vec<AblationRow>> {
    if variants.is_empty() {
        return Err(Error::arg("no variants to compare"));
    }
    let mut rows = Vec::new();
    for v in variants {
        let run_id = run_id_for(&cfg.run_id, v, cfg.train.seed);
        let mut c = cfg.clone();
        c.run_id = run_id.clone();
        c.train.hlm_variant = v.clone();
        let dir = out_root.join(&run_id);
        crate::training::write_atomic(&dir.join("config.json"), c.to_json()?.as_bytes())?;
        let run = run_tham::<S>(&c, corpus, &dir)?;
        rows.push(AblationRow {
            variant: v.name(),
            run_id,
            seed: c.train.seed,
            bleu4: run.metrics.bleu[3],
            rouge_l: run.metrics.rouge_l,
            video_only_accuracy: run.metrics.video_only_accuracy,
            copy_rate: run.metrics.copy_rate,
            best_val_ce: run
                .stage2
                .history
                .iter()
                .find(|r| r.epoch == run.stage2.best_epoch)
                .and_then(|r| r.val_ce),
        });
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Integrity(e.to_string()))?;
    crate::training::write_atomic(&out_root.join(format!("{}-ablation.csv", cfg.run_id)), &bytes)?;
    Ok(rows)
}
