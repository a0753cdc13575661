//! Mini-batch training with Adam, global-norm clipping and early stopping.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::autodiff::Tape;
use crate::checkpoint;
use crate::data::Window;
use crate::error::{Error, Result};
use crate::metrics::{fmt_metric, Scores};
use crate::model::KtModel;
use crate::optim::{clip_global_norm, Adam, AdamConfig};
use crate::params::{ParamGrads, ParamStore};
use crate::rng::Rng;
use crate::scalar::Float;

pub const METRICS_LOG: &str = "metrics.log";
pub const TIMING_LOG: &str = "timing.log";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 64,
            max_epochs: 100,
            patience: 10,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean objective per valid position.
    pub train_loss: f64,
    pub val: Scores,
    pub wall_seconds: f64,
}

impl EpochRecord {
    /// Deterministic log line; wall time is kept out of it.
    pub fn metrics_line(&self) -> String {
        format!(
            "epoch={} train_loss={:.6} val_auc={} val_acc={}",
            self.epoch,
            self.train_loss,
            fmt_metric(self.val.auc),
            fmt_metric(self.val.acc)
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: Scores,
    pub stopped_early: bool,
}

/// Probabilities and labels at every valid position of `windows`.
pub fn predict_windows<F: Float>(
    model: &KtModel,
    store: &ParamStore<F>,
    windows: &[Window],
) -> Result<(Vec<f64>, Vec<bool>)> {
    let per: Vec<(Vec<f64>, Vec<bool>)> = windows
        .par_iter()
        .map(|w| {
            let items = w.items();
            if items.is_empty() {
                return Ok((Vec::new(), Vec::new()));
            }
            let p = model.predict(store, &items)?;
            let (mut ps, mut ls) = (Vec::new(), Vec::new());
            for (t, it) in items.iter().enumerate() {
                if w.mask[t] {
                    ps.push(p[t].as_f64());
                    ls.push(it.response == 1);
                }
            }
            Ok((ps, ls))
        })
        .collect::<Result<_>>()?;
    let (mut p, mut l) = (Vec::new(), Vec::new());
    for (a, b) in per {
        p.extend(a);
        l.extend(b);
    }
    Ok((p, l))
}

pub fn evaluate<F: Float>(
    model: &KtModel,
    store: &ParamStore<F>,
    windows: &[Window],
) -> Result<Scores> {
    let (p, l) = predict_windows(model, store, windows)?;
    Ok(Scores::compute(&p, &l))
}

/// Gradient of the summed objective over `batch` plus the λ penalty once.
/// Per-sequence tapes may run in parallel; gradients are summed in batch
/// order so the result does not depend on scheduling. Sequence `i` draws its
/// dropout masks from stream `i` of `dropout_seed`.
pub fn batch_gradients<F: Float>(
    model: &KtModel,
    store: &ParamStore<F>,
    batch: &[&Window],
    dropout_seed: u64,
) -> Result<(F, usize, ParamGrads<F>)> {
    let n = store.len();
    let parts: Vec<(F, ParamGrads<F>)> = batch
        .par_iter()
        .enumerate()
        .filter(|(_, w)| w.num_valid() > 0)
        .map(|(i, w)| {
            let items = w.items();
            let mut tape = Tape::new();
            let mut rng = Rng::new(dropout_seed).split(i as u64);
            let l = model.bce_train(store, &mut tape, &items, &mut rng)?;
            let v = tape.value(l).item();
            Ok((v, tape.backward(l)?.into_param_grads(n)))
        })
        .collect::<Result<_>>()?;
    let mut total = F::zero();
    let mut grads = ParamGrads::empty(n);
    for (v, g) in &parts {
        total += *v;
        grads.accumulate(g);
    }
    let mut tape = Tape::new();
    if let Some(reg) = model.regularizer(store, &mut tape) {
        total += tape.value(reg).item();
        grads.accumulate(&tape.backward(reg)?.into_param_grads(n));
    }
    let n_valid = batch.iter().map(|w| w.num_valid()).sum();
    Ok((total, n_valid, grads))
}

pub struct Trainer<'m> {
    pub model: &'m KtModel,
    pub config: TrainConfig,
    /// Receives `metrics.log`, `timing.log` and `best.ckpt` when set.
    pub out_dir: Option<PathBuf>,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m KtModel, config: TrainConfig) -> Self {
        Self {
            model,
            config,
            out_dir: None,
        }
    }

    pub fn with_output(mut self, dir: impl Into<PathBuf>) -> Self {
        self.out_dir = Some(dir.into());
        self
    }

    /// One pass over `train` in a seeded shuffled order; returns the mean
    /// objective per valid position.
    pub fn run_epoch<F: Float>(
        &self,
        store: &mut ParamStore<F>,
        adam: &mut Adam<F>,
        train: &[Window],
        epoch: usize,
    ) -> Result<f64> {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = Rng::new(self.config.seed).split(epoch as u64 + 1);
        rng.shuffle(&mut order);
        let (mut loss_sum, mut positions) = (0.0, 0usize);
        for (b, chunk) in order.chunks(self.config.batch_size.max(1)).enumerate() {
            let batch: Vec<&Window> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, n_valid, mut grads) =
                batch_gradients(self.model, store, &batch, rng.next_u64())?;
            if n_valid == 0 {
                continue;
            }
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    what: "loss",
                    detail: format!("epoch {epoch} batch {b}: objective is {loss}"),
                });
            }
            grads.scale(F::one() / F::from_usize(n_valid).unwrap());
            if let Some(name) = grads.first_non_finite(store) {
                return Err(Error::Diverged {
                    what: "gradient",
                    detail: format!("epoch {epoch} batch {b}: non-finite gradient for {name}"),
                });
            }
            clip_global_norm(&mut grads, self.config.clip_norm);
            adam.step(store, &grads)?;
            loss_sum += loss.as_f64();
            positions += n_valid;
        }
        Ok(loss_sum / positions.max(1) as f64)
    }

    /// Trains until `max_epochs` or until neither validation AUC nor ACC
    /// has improved for `patience` epochs. `store` ends holding the
    /// parameters with the best validation AUC.
    pub fn fit<F: Float>(
        &self,
        store: &mut ParamStore<F>,
        train: &[Window],
        val: &[Window],
    ) -> Result<TrainReport> {
        if train.iter().all(|w| w.num_valid() == 0) {
            return Err(Error::EmptyDataset(
                "training split has no interactions".into(),
            ));
        }
        if val.iter().all(|w| w.num_valid() == 0) {
            return Err(Error::EmptyDataset(
                "validation split has no interactions".into(),
            ));
        }
        let mut logs = match &self.out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                Some((
                    create(&dir.join(METRICS_LOG))?,
                    create(&dir.join(TIMING_LOG))?,
                ))
            }
            None => None,
        };
        let mut adam = Adam::new(
            AdamConfig {
                lr: self.config.lr,
                ..AdamConfig::default()
            },
            store,
        );
        let mut history = Vec::new();
        let mut best: Option<(usize, Scores, ParamStore<F>)> = None;
        let (mut best_auc, mut best_acc) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        let mut stale = 0;
        let mut stopped_early = false;
        for epoch in 1..=self.config.max_epochs {
            let started = Instant::now();
            let train_loss = self.run_epoch(store, &mut adam, train, epoch)?;
            let val_scores = evaluate(self.model, store, val)?;
            let rec = EpochRecord {
                epoch,
                train_loss,
                val: val_scores,
                wall_seconds: started.elapsed().as_secs_f64(),
            };
            if let Some((m, t)) = &mut logs {
                append(m, &rec.metrics_line(), &self.out_dir)?;
                append(
                    t,
                    &format!("epoch={} wall_seconds={:.3}", epoch, rec.wall_seconds),
                    &self.out_dir,
                )?;
            }
            let auc = val_scores.auc.unwrap_or(f64::NEG_INFINITY);
            let acc = val_scores.acc.unwrap_or(f64::NEG_INFINITY);
            let better_auc = auc > best_auc;
            let improved = better_auc || acc > best_acc;
            best_acc = best_acc.max(acc);
            if better_auc || best.is_none() {
                best_auc = best_auc.max(auc);
                best = Some((epoch, val_scores, store.clone()));
                if let Some(dir) = &self.out_dir {
                    checkpoint::save(&dir.join(BEST_CHECKPOINT), store)?;
                }
            }
            history.push(rec);
            stale = if improved { 0 } else { stale + 1 };
            if stale >= self.config.patience {
                stopped_early = true;
                break;
            }
        }
        let (best_epoch, best_val, best_store) =
            best.ok_or_else(|| Error::Config("max_epochs must be at least 1".into()))?;
        *store = best_store;
        Ok(TrainReport {
            history,
            best_epoch,
            best_val,
            stopped_early,
        })
    }
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| Error::io(path, e))
}

fn append(f: &mut File, line: &str, dir: &Option<PathBuf>) -> Result<()> {
    let mut s = String::with_capacity(line.len() + 1);
    let _ = writeln!(s, "{line}");
    f.write_all(s.as_bytes())
        .and_then(|_| f.flush())
        .map_err(|e| Error::io(dir.as_deref().unwrap_or(Path::new(".")), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_mastery, window, SynthConfig};
    use crate::model::ModelConfig;

    fn setup() -> (KtModel, ParamStore<f64>, Vec<Window>) {
        let syn = synth_mastery(&SynthConfig {
            n_students: 12,
            t_len: 24,
            ..Default::default()
        });
        let cfg = ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_state: 4,
            ..ModelConfig::new(100, 10)
        };
        let (m, s) = KtModel::init(cfg, 3).unwrap();
        (m, s, window(&syn.sequences, 24))
    }

    #[test]
    fn zero_learning_rate_keeps_parameters_bitwise() {
        let (m, mut store, ws) = setup();
        let before = store.clone();
        let cfg = TrainConfig {
            lr: 0.0,
            batch_size: 4,
            ..Default::default()
        };
        let t = Trainer::new(&m, cfg.clone());
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.0,
                ..Default::default()
            },
            &store,
        );
        t.run_epoch(&mut store, &mut adam, &ws, 1).unwrap();
        for ((_, a), (_, b)) in before.iter().zip(store.iter()) {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
    }

    #[test]
    fn empty_training_split_is_rejected() {
        let (m, mut store, ws) = setup();
        let t = Trainer::new(&m, TrainConfig::default());
        assert!(matches!(
            t.fit(&mut store, &[], &ws),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn batch_gradient_is_sum_of_sequence_gradients() {
        let (m, store, ws) = setup();
        let refs: Vec<&Window> = ws.iter().take(3).collect();
        let (_, _, g) = batch_gradients(&m, &store, &refs, 0).unwrap();
        let mut want = ParamGrads::empty(store.len());
        for w in &refs {
            let mut tape = Tape::new();
            let l = m.loss(&store, &mut tape, &w.items()).unwrap();
            want.accumulate(&tape.backward(l).unwrap().into_param_grads(store.len()));
        }
        // the penalty enters once per batch, not once per sequence
        let mut tape = Tape::new();
        let reg = m.regularizer(&store, &mut tape).unwrap();
        let mut r = tape.backward(reg).unwrap().into_param_grads(store.len());
        r.scale(-2.0);
        want.accumulate(&r);
        for id in store.ids() {
            if let (Some(a), Some(b)) = (g.get(id), want.get(id)) {
                for (x, y) in a.data().iter().zip(b.data()) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn fit_writes_logs_and_checkpoint() {
        let (m, mut store, ws) = setup();
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            max_epochs: 3,
            batch_size: 4,
            ..Default::default()
        };
        let rep = Trainer::new(&m, cfg)
            .with_output(dir.path())
            .fit(&mut store, &ws[..8], &ws[8..])
            .unwrap();
        assert_eq!(rep.history.len(), 3);
        let log = fs::read_to_string(dir.path().join(METRICS_LOG)).unwrap();
        assert_eq!(log.lines().count(), 3);
        assert!(log.starts_with("epoch=1 train_loss="));
        let back: ParamStore<f64> = checkpoint::load(&dir.path().join(BEST_CHECKPOINT)).unwrap();
        for ((_, a), (_, b)) in back.iter().zip(store.iter()) {
            assert_eq!(a.value, b.value);
        }
    }
}
