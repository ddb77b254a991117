use std::fs;
use std::path::PathBuf;

use super::{
    all_features, ce_epoch, fingerprint, mean_ce, pack, shuffled, thr_graph, EpochRecord, KeepCheckpoints,
    LrSchedule, ModelState, Phase, PhiState, RunControl, RunDir, RunState, Stage2Mode, Task, TrainConfig,
};
use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::mine::{derangement, dv_lower_bound, FeaturePairBatch, MineTrainer, StatisticsNetwork};
use crate::model::{Checkpoint, PackedBatch, Transformer};
use crate::params::Adam;
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub(crate) const STAGE2_NAME: &str = "rlm_stage2";

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Outcome {
    /// Checkpoint of the `θ` epoch with the lowest validation objective.
    pub rlm: PathBuf,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub finished: bool,
}

/// Frozen models producing the signal `G`.
struct Signal<S: Scalar> {
    hlm: Transformer<S>,
    lm: Option<Transformer<S>>,
    hlm_hash: String,
    lm_hash: Option<String>,
}

impl<S: Scalar> Signal<S> {
    fn batch_g(&self, hb: &PackedBatch<S>, lb: Option<&PackedBatch<S>>) -> Result<Matrix<S>> {
        match (&self.lm, lb) {
            (Some(lm), Some(lb)) => super::pure_h_features(&self.hlm, hb, lm, lb),
            _ => Ok(self.hlm.features(hb)),
        }
    }

    fn verify_frozen(&self) -> Result<()> {
        let lm_ok = match (&self.lm, &self.lm_hash) {
            (Some(m), Some(h)) => &m.params.content_hash() == h,
            _ => true,
        };
        if self.hlm.params.content_hash() != self.hlm_hash || !lm_ok {
            return Err(Error::Integrity("a frozen model changed during stage 2".into()));
        }
        Ok(())
    }
}

fn check_compatible(rlm: &Checkpoint, hlm: &Checkpoint, lm: &Checkpoint, task: &Task<'_>) -> Result<()> {
    for (name, ck) in [("response", rlm), ("hallucination", hlm), ("pure", lm)] {
        ck.verify_vocab(&task.vocab)
            .map_err(|_| Error::Checkpoint(format!("{name} model vocabulary differs from the corpus vocabulary")))?;
        if ck.model.d != rlm.model.d {
            return Err(Error::Checkpoint(format!(
                "{name} model has d = {}, response model has d = {}",
                ck.model.d, rlm.model.d
            )));
        }
    }
    Ok(())
}

/// Alternating minimax training of the response model. Odd epochs ascend the
/// DV bound in `φ` with `θ` frozen; even epochs descend
/// `L_RLM(θ) + α·L_THR(θ, φ)` with `φ` frozen. The hallucination and pure
/// models never change.
pub fn train_stage2<S: Scalar>(
    rlm_ck: &Checkpoint,
    hlm_ck: &Checkpoint,
    lm_ck: &Checkpoint,
    cfg: &TrainConfig,
    task: &Task<'_>,
    run: &RunDir,
    ctl: RunControl,
) -> Result<Stage2Outcome> {
    cfg.validate()?;
    if cfg.epochs_stage2 < 2 {
        return Err(Error::Config {
            key: "train.epochs_stage2".into(),
            message: "needs at least two epochs to include a response-model update".into(),
        });
    }
    check_compatible(rlm_ck, hlm_ck, lm_ck, task)?;
    let mode = cfg.mode;
    let mut rlm: Transformer<S> = rlm_ck.to_model()?;
    let signal = if mode == Stage2Mode::CeContinuation {
        None
    } else {
        let hlm: Transformer<S> = hlm_ck.to_model()?;
        let lm: Option<Transformer<S>> = if mode == Stage2Mode::Thr { Some(lm_ck.to_model()?) } else { None };
        Some(Signal {
            hlm_hash: hlm.params.content_hash(),
            lm_hash: lm.as_ref().map(|m| m.params.content_hash()),
            hlm,
            lm,
        })
    };
    let mcfg = rlm.config.clone();
    let d = mcfg.d;
    let rlm_train = task.compose(&task.train, &rlm_ck.composition)?;
    let rlm_valid = task.compose(&task.valid, &rlm_ck.composition)?;
    let (hlm_train, lm_train, g_valid) = match &signal {
        Some(sig) => {
            let ht = task.compose(&task.train, &hlm_ck.composition)?;
            let hv = task.compose(&task.valid, &hlm_ck.composition)?;
            let mut gv = all_features(&sig.hlm, &hv, cfg.eval_batch_size)?;
            let lt = match &sig.lm {
                Some(lm) => {
                    let lv = task.compose(&task.valid, &lm_ck.composition)?;
                    gv = gv.sub(&all_features(lm, &lv, cfg.eval_batch_size)?);
                    Some(task.compose(&task.train, &lm_ck.composition)?)
                }
                None => None,
            };
            (Some(ht), lt, Some(gv))
        }
        None => (None, None, None),
    };
    let val_perm = g_valid
        .as_ref()
        .map(|g| derangement(g.rows(), &mut stream(cfg.seed, "val-derange", &[])));

    let n = task.train.len();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let theta_epochs = cfg.epochs_stage2 / 2;
    let sched = LrSchedule::new(
        cfg.theta_lr_stage2(),
        cfg.warmup_stage2(),
        per_epoch * theta_epochs,
        "train.stage2_warmup_steps",
    )?;
    let fp = fingerprint(&(
        2u8,
        cfg,
        &rlm_ck.param_hash,
        &hlm_ck.param_hash,
        &lm_ck.param_hash,
        task.vocab.hash(),
        n,
    ))?;

    let net = StatisticsNetwork::<S>::new(d, cfg.mine, &mut stream(cfg.seed, "phi-init", &[]))?;
    let mut phi = MineTrainer::new(net, cfg.ema_rate)?;
    let mut adam = Adam::new(cfg.adam, &rlm.params);
    let mut step = 0u64;
    let mut best: Option<(usize, f64)> = None;
    let mut history = Vec::new();
    let mut start = 1;
    let state_path = run.state(2);
    if ctl.resume && state_path.exists() {
        let st = RunState::load(&state_path)?;
        if st.stage != 2 || st.fingerprint != fp {
            return Err(Error::Config {
                key: "train".into(),
                message: "saved stage-2 state belongs to a different configuration".into(),
            });
        }
        let ms = st
            .models
            .first()
            .ok_or_else(|| Error::Checkpoint("stage-2 state has no model".into()))?;
        rlm.params.load_record(&ms.params)?;
        adam = ms.adam.clone();
        step = ms.step;
        best = ms.best_epoch.zip(ms.best_val);
        if let Some(p) = &st.phi {
            phi.net.params.load_record(&p.params)?;
            phi.adam = p.adam.clone();
            phi.log_ema = p.log_ema;
        }
        history = st.history;
        start = st.epoch + 1;
        log::info!("resuming stage 2 after epoch {}", st.epoch);
    }

    for epoch in start..=cfg.epochs_stage2 {
        let phase = if epoch % 2 == 1 { Phase::Phi } else { Phase::Theta };
        let order = shuffled(n, &mut stream(cfg.seed, "shuffle", &[2, epoch as u64]));
        let mut drop = stream(cfg.seed, "dropout", &[2, 0, epoch as u64]);
        let mut derange = stream(cfg.seed, "derange", &[epoch as u64]);
        let mut l_rlm = None;
        let mut l_thr = None;
        let mut lr = 0.0;
        match (&signal, phase) {
            (None, Phase::Phi) => {}
            (None, Phase::Theta) => {
                let (l, last) = ce_epoch(
                    &mut rlm, &mut adam, &mut step, &sched, &rlm_train, &order, cfg.batch_size, &mut drop, "rlm",
                )?;
                l_rlm = Some(l);
                lr = last;
            }
            (Some(sig), _) => {
                let ht = hlm_train.as_ref().expect("signal inputs");
                let mut sums = (0.0, 0.0);
                for chunk in order.chunks(cfg.batch_size) {
                    let rb = pack::<S>(&rlm_train, chunk, &mcfg)?;
                    let hb = pack::<S>(ht, chunk, &sig.hlm.config)?;
                    let lb = match (&sig.lm, &lm_train) {
                        (Some(lm), Some(lt)) => Some(pack::<S>(lt, chunk, &lm.config)?),
                        _ => None,
                    };
                    let gf = sig.batch_g(&hb, lb.as_ref())?;
                    let perm = derangement(gf.rows(), &mut derange);
                    let (ce, thr) = match phase {
                        Phase::Theta => {
                            let r = theta_step(&mut rlm, &mut adam, &mut step, &sched, &rb, &gf, &perm, &phi.net, cfg.alpha, &mut drop)?;
                            lr = r.2;
                            (r.0, r.1)
                        }
                        Phase::Phi => {
                            let (ce, f) = rlm.evaluate(&rb);
                            let batch = FeaturePairBatch { f, g: gf, perm };
                            // the estimator anneals with the responder
                            lr = cfg.mine_lr * sched.decay_factor(step);
                            let s = phi.step(&batch, lr)?;
                            (ce, s.estimate)
                        }
                    };
                    sums.0 += ce * chunk.len() as f64;
                    sums.1 += thr * chunk.len() as f64;
                }
                l_rlm = Some(sums.0 / n as f64);
                l_thr = Some(sums.1 / n as f64);
                sig.verify_frozen()?;
            }
        }

        let val_ce = if signal.is_none() && phase == Phase::Phi {
            history.last().and_then(|r: &EpochRecord| r.val_ce).or(Some(rlm_ck.val_ce.unwrap_or(f64::NAN)))
        } else {
            Some(mean_ce(&rlm, &rlm_valid, cfg.eval_batch_size)?)
        };
        let val_thr = match (&g_valid, &val_perm) {
            (Some(gv), Some(vp)) => {
                let f = all_features(&rlm, &rlm_valid, cfg.eval_batch_size)?;
                let b = FeaturePairBatch {
                    f,
                    g: gv.clone(),
                    perm: vp.clone(),
                };
                Some(dv_lower_bound(&phi.net, &b)?)
            }
            _ => None,
        };
        if phase == Phase::Theta {
            let objective = val_ce.unwrap_or(f64::INFINITY);
            let improved = best.is_none_or(|(_, b)| objective < b);
            let keep_all = cfg.keep_checkpoints == KeepCheckpoints::All;
            if improved || keep_all {
                let ck = Checkpoint::new(&rlm, &rlm_ck.composition, &task.vocab, epoch, val_ce);
                ck.save(&run.checkpoint(STAGE2_NAME, epoch))?;
            }
            if improved {
                if let (Some((old, _)), false) = (best, keep_all) {
                    let _ = fs::remove_file(run.checkpoint(STAGE2_NAME, old));
                }
                best = Some((epoch, objective));
            }
        }
        let rec = EpochRecord {
            stage: 2,
            epoch,
            phase: Some(phase),
            l_rlm,
            l_hlm: None,
            l_lm: None,
            l_thr,
            lr,
            val_ce,
            val_hlm: None,
            val_lm: None,
            val_thr,
            param_hash: rlm.params.content_hash(),
            phi_hash: signal.as_ref().map(|_| phi.net.params.content_hash()),
        };
        log::info!(
            "stage 2 epoch {epoch} ({phase:?}): ce {:?} thr {:?} val_ce {:?} val_thr {:?}",
            l_rlm,
            l_thr,
            val_ce,
            val_thr
        );
        history.push(rec);
        run.write_metrics(2, &history)?;
        let st = RunState {
            stage: 2,
            fingerprint: fp.clone(),
            seed: cfg.seed,
            epoch,
            models: vec![ModelState {
                name: "rlm".into(),
                params: rlm.params.to_record(),
                adam: adam.clone(),
                step,
                best_epoch: best.map(|b| b.0),
                best_val: best.map(|b| b.1),
            }],
            phi: signal.as_ref().map(|_| PhiState {
                params: phi.net.params.to_record(),
                adam: phi.adam.clone(),
                log_ema: phi.log_ema,
            }),
            history: history.clone(),
        };
        st.save(&state_path)?;
        if ctl.stop_after == Some(epoch) && epoch < cfg.epochs_stage2 {
            return Ok(outcome(run, best, history, false));
        }
    }
    Ok(outcome(run, best, history, true))
}

fn outcome(run: &RunDir, best: Option<(usize, f64)>, history: Vec<EpochRecord>, finished: bool) -> Stage2Outcome {
    let e = best.map_or(0, |b| b.0);
    Stage2Outcome {
        rlm: run.checkpoint(STAGE2_NAME, e),
        best_epoch: e,
        history,
        finished,
    }
}

/// One `θ` update on `L_RLM + α·L_THR`; returns `(ce, thr, lr)`.
#[allow(clippy::too_many_arguments)]
fn theta_step<S: Scalar>(
    rlm: &mut Transformer<S>,
    adam: &mut Adam,
    step: &mut u64,
    sched: &LrSchedule,
    rb: &PackedBatch<S>,
    gf: &Matrix<S>,
    perm: &[usize],
    t: &StatisticsNetwork<S>,
    alpha: f64,
    drop: &mut rand_chacha::ChaCha8Rng,
) -> Result<(f64, f64, f64)> {
    let mut g = Graph::new();
    let rng = (rlm.config.dropout > 0.0).then_some(&mut *drop);
    let (out, thr) = thr_graph(&mut g, rlm, rb, gf, perm, t, true, false, rng)?;
    let ce = g.cross_entropy(out.logits, &rb.targets, &rb.weights);
    let (cev, thrv) = (g.scalar(ce).as_f64(), g.scalar(thr).as_f64());
    // max(L_THR, 0): a negative estimate carries no dependence to remove
    let w = if thrv > 0.0 { alpha } else { 0.0 };
    let reg = g.scale(thr, S::lit(w));
    let total = g.add(ce, reg);
    let grads = g.backward(total, &rlm.params);
    if !cev.is_finite() || !thrv.is_finite() || !grads.is_finite() {
        return Err(Error::Divergence(format!(
            "stage 2: non-finite objective (ce {cev}, thr {thrv}) at step {}",
            *step + 1
        )));
    }
    *step += 1;
    let lr = sched.at(*step);
    adam.update(&mut rlm.params, &grads, lr);
    Ok((cev, thrv, lr))
}
