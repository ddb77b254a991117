use std::fs;
use std::path::PathBuf;

use super::{
    ce_epoch, fingerprint, mean_ce, shuffled, EpochRecord, KeepCheckpoints, LrSchedule, ModelState, RunControl,
    RunDir, RunState, Task, TrainConfig,
};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, ModelConfig, SegmentComposition, Transformer};
use crate::params::Adam;
use crate::rng::stream;
use crate::scalar::Scalar;

pub(crate) const NAMES: [&str; 3] = ["rlm", "hlm", "lm"];

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Outcome {
    /// Best checkpoints of the response, hallucination and pure models.
    pub rlm: PathBuf,
    pub hlm: PathBuf,
    pub lm: PathBuf,
    pub best_epochs: [usize; 3],
    pub history: Vec<EpochRecord>,
    /// False when stopped early through [`RunControl::stop_after`].
    pub finished: bool,
}

struct Slot<S: Scalar> {
    model: Transformer<S>,
    adam: Adam,
    step: u64,
    best: Option<(usize, f64)>,
}

fn state_of<S: Scalar>(slots: &[Slot<S>], fp: &str, seed: u64, epoch: usize, history: &[EpochRecord]) -> RunState {
    RunState {
        stage: 1,
        fingerprint: fp.to_string(),
        seed,
        epoch,
        models: slots
            .iter()
            .zip(NAMES)
            .map(|(s, n)| ModelState {
                name: n.into(),
                params: s.model.params.to_record(),
                adam: s.adam.clone(),
                step: s.step,
                best_epoch: s.best.map(|b| b.0),
                best_val: s.best.map(|b| b.1),
            })
            .collect(),
        phi: None,
        history: history.to_vec(),
    }
}

/// Trains the response model on `[v‖h‖q‖a]`, the hallucination model on
/// `cfg.hlm_variant` and the pure language model on `[a]`, each selected by
/// its lowest validation cross-entropy. All three start from the same
/// initialization and see batches in the same order.
pub fn train_stage1<S: Scalar>(
    cfg: &TrainConfig,
    model: &ModelConfig,
    task: &Task<'_>,
    run: &RunDir,
    ctl: RunControl,
) -> Result<Stage1Outcome> {
    cfg.validate()?;
    let mcfg = task.model_config(model)?;
    let comps = [
        SegmentComposition::full(),
        cfg.hlm_variant.clone(),
        SegmentComposition::answer_only(),
    ];
    let train: Vec<_> = comps.iter().map(|c| task.compose(&task.train, c)).collect::<Result<_>>()?;
    let valid: Vec<_> = comps.iter().map(|c| task.compose(&task.valid, c)).collect::<Result<_>>()?;
    let n = task.train.len();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let sched = LrSchedule::new(cfg.peak_lr, cfg.warmup_steps, per_epoch * cfg.epochs_stage1, "train.warmup_steps")?;
    let fp = fingerprint(&(1u8, cfg, &mcfg, task.vocab.hash(), n))?;

    let init = Transformer::<S>::new(mcfg.clone(), &mut stream(cfg.seed, "init", &[]))?;
    let mut slots: Vec<Slot<S>> = (0..3)
        .map(|_| Slot {
            adam: Adam::new(cfg.adam, &init.params),
            model: init.clone(),
            step: 0,
            best: None,
        })
        .collect();
    let mut history = Vec::new();
    let mut start = 1;
    let state_path = run.state(1);
    if ctl.resume && state_path.exists() {
        let st = RunState::load(&state_path)?;
        if st.stage != 1 || st.fingerprint != fp {
            return Err(Error::Config {
                key: "train".into(),
                message: "saved stage-1 state belongs to a different configuration".into(),
            });
        }
        for (slot, ms) in slots.iter_mut().zip(&st.models) {
            slot.model.params.load_record(&ms.params)?;
            slot.adam = ms.adam.clone();
            slot.step = ms.step;
            slot.best = ms.best_epoch.zip(ms.best_val);
        }
        history = st.history;
        start = st.epoch + 1;
        log::info!("resuming stage 1 after epoch {}", st.epoch);
    }

    for epoch in start..=cfg.epochs_stage1 {
        let order = shuffled(n, &mut stream(cfg.seed, "shuffle", &[1, epoch as u64]));
        let mut losses = [0.0; 3];
        let mut vals = [0.0; 3];
        let mut lr = 0.0;
        for (k, slot) in slots.iter_mut().enumerate() {
            let mut drop = stream(cfg.seed, "dropout", &[1, k as u64, epoch as u64]);
            let res = ce_epoch(
                &mut slot.model,
                &mut slot.adam,
                &mut slot.step,
                &sched,
                &train[k],
                &order,
                cfg.batch_size,
                &mut drop,
                NAMES[k],
            );
            let (loss, last_lr) = match res {
                Ok(v) => v,
                Err(e) => {
                    let dump = run.root.join("divergence_stage1.json");
                    let st = RunState {
                        stage: 1,
                        fingerprint: fp.clone(),
                        seed: cfg.seed,
                        epoch,
                        models: vec![ModelState {
                            name: NAMES[k].into(),
                            params: slot.model.params.to_record(),
                            adam: slot.adam.clone(),
                            step: slot.step,
                            best_epoch: None,
                            best_val: None,
                        }],
                        phi: None,
                        history: history.clone(),
                    };
                    st.save(&dump)?;
                    return Err(e);
                }
            };
            lr = last_lr;
            losses[k] = loss;
            vals[k] = mean_ce(&slot.model, &valid[k], cfg.eval_batch_size)?;
            let improved = slot.best.is_none_or(|(_, b)| vals[k] < b);
            let keep_all = cfg.keep_checkpoints == KeepCheckpoints::All;
            if improved || keep_all {
                let ck = Checkpoint::new(&slot.model, &comps[k], &task.vocab, epoch, Some(vals[k]));
                ck.save(&run.checkpoint(NAMES[k], epoch))?;
            }
            if improved {
                if let (Some((old, _)), false) = (slot.best, keep_all) {
                    let _ = fs::remove_file(run.checkpoint(NAMES[k], old));
                }
                slot.best = Some((epoch, vals[k]));
            }
        }
        let rec = EpochRecord {
            stage: 1,
            epoch,
            phase: None,
            l_rlm: Some(losses[0]),
            l_hlm: Some(losses[1]),
            l_lm: Some(losses[2]),
            l_thr: None,
            lr,
            val_ce: Some(vals[0]),
            val_hlm: Some(vals[1]),
            val_lm: Some(vals[2]),
            val_thr: None,
            param_hash: slots[0].model.params.content_hash(),
            phi_hash: None,
        };
        log::info!(
            "stage 1 epoch {epoch}: rlm {:.4}/{:.4} hlm {:.4}/{:.4} lm {:.4}/{:.4}",
            losses[0],
            vals[0],
            losses[1],
            vals[1],
            losses[2],
            vals[2]
        );
        history.push(rec);
        run.write_metrics(1, &history)?;
        state_of(&slots, &fp, cfg.seed, epoch, &history).save(&state_path)?;
        if ctl.stop_after == Some(epoch) && epoch < cfg.epochs_stage1 {
            return outcome(run, &slots, history, false);
        }
    }
    outcome(run, &slots, history, true)
}

fn outcome<S: Scalar>(run: &RunDir, slots: &[Slot<S>], history: Vec<EpochRecord>, finished: bool) -> Result<Stage1Outcome> {
    let best: Vec<usize> = slots.iter().map(|s| s.best.map_or(0, |b| b.0)).collect();
    Ok(Stage1Outcome {
        rlm: run.checkpoint(NAMES[0], best[0]),
        hlm: run.checkpoint(NAMES[1], best[1]),
        lm: run.checkpoint(NAMES[2], best[2]),
        best_epochs: [best[0], best[1], best[2]],
        history,
        finished,
    })
}
