//! Sequence-length scaling harness: wall time per training step and per
//! inference step, and tape scalar counts as a deterministic memory proxy.

use std::fmt::Write as _;
use std::time::Instant;

use crate::autodiff::Tape;
use crate::data::Interaction;
use crate::error::Result;
use crate::model::{Arch, KtModel, ModelConfig};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::scalar::Float;

pub const CSV_HEADER: &str = "model,T,train_step_s,infer_step_s,tape_scalars,params";

pub const WARMUPS: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub model: Arch,
    pub t_len: usize,
    /// Median seconds for forward, backward and one optimizer update on a
    /// single sequence.
    pub train_step_s: f64,
    /// Median seconds to produce the prediction for position `T − 1`: one
    /// recurrent step after `T − 1` consumed tokens for the Mamba model, a
    /// full causal pass for attention.
    pub infer_step_s: f64,
    /// Scalars the tape retains for the backward pass of one training step.
    pub tape_scalars: usize,
    pub params: usize,
    /// Size of the recurrent inference state after `T` steps (Mamba only).
    pub state_scalars: Option<usize>,
}

impl BenchRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{:.6e},{:.6e},{},{}",
            self.model,
            self.t_len,
            self.train_step_s,
            self.infer_step_s,
            self.tape_scalars,
            self.params
        )
    }
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub models: Vec<Arch>,
    pub seqlens: Vec<usize>,
    pub d_model: usize,
    pub n_layers: usize,
    pub repeats: usize,
    pub seed: u64,
    /// Vocabulary of the synthetic input sequence.
    pub n_questions: usize,
    pub n_concepts: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            models: vec![Arch::Mamba, Arch::Attention],
            seqlens: vec![128, 256, 512],
            d_model: 128,
            n_layers: 5,
            repeats: 5,
            seed: 0,
            n_questions: 100,
            n_concepts: 10,
        }
    }
}

impl BenchConfig {
    pub fn model_config(&self, arch: Arch, t_len: usize) -> ModelConfig {
        ModelConfig {
            arch,
            d_model: self.d_model,
            n_layers: self.n_layers,
            max_seq_len: t_len,
            ..ModelConfig::new(self.n_questions, self.n_concepts)
        }
    }
}

pub fn random_sequence(
    t_len: usize,
    n_questions: usize,
    n_concepts: usize,
    seed: u64,
) -> Vec<Interaction> {
    let mut rng = Rng::new(seed);
    (0..t_len)
        .map(|_| {
            let q = rng.below(n_questions);
            Interaction {
                question: q,
                concept: q % n_concepts,
                response: rng.below(2) as u8,
            }
        })
        .collect()
}

/// Scalars retained by the tape for one training step on `seq`.
pub fn tape_scalars<F: Float>(
    model: &KtModel,
    store: &ParamStore<F>,
    seq: &[Interaction],
) -> Result<usize> {
    let mut tape = Tape::new();
    model.loss(store, &mut tape, seq)?;
    Ok(tape.saved_scalars())
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn time_median(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    for _ in 0..WARMUPS {
        f()?;
    }
    let mut xs = Vec::with_capacity(repeats);
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        f()?;
        xs.push(t.elapsed().as_secs_f64());
    }
    Ok(median(xs))
}

/// Runs one configuration. With `timed == false` only the deterministic
/// counts are filled in and times are `NaN`.
pub fn bench_one<F: Float>(
    cfg: &BenchConfig,
    arch: Arch,
    t_len: usize,
    timed: bool,
) -> Result<BenchRecord> {
    let (model, mut store) = KtModel::init::<F>(cfg.model_config(arch, t_len), cfg.seed)?;
    let seq = random_sequence(t_len, cfg.n_questions, cfg.n_concepts, cfg.seed ^ 0x5eed);
    let tape_scalars = tape_scalars(&model, &store, &seq)?;
    let params = store.num_scalars();
    let state_scalars = match arch {
        Arch::Mamba => {
            let mut st = model.init_state(&store)?;
            for it in &seq {
                model.step(&store, &mut st, it.question, it.concept)?;
                model.observe(&store, &mut st, *it)?;
            }
            Some(st.num_scalars())
        }
        Arch::Attention => None,
    };
    let (mut train_step_s, mut infer_step_s) = (f64::NAN, f64::NAN);
    if timed {
        let mut adam = Adam::new(AdamConfig::default(), &store);
        train_step_s = time_median(cfg.repeats, || {
            let mut tape = Tape::new();
            let l = model.loss(&store, &mut tape, &seq)?;
            let g = tape.backward(l)?.into_param_grads(store.len());
            adam.step(&mut store, &g)
        })?;
        infer_step_s = match arch {
            Arch::Mamba => {
                let mut st = model.init_state(&store)?;
                for it in &seq[..t_len - 1] {
                    model.step(&store, &mut st, it.question, it.concept)?;
                    model.observe(&store, &mut st, *it)?;
                }
                let last = seq[t_len - 1];
                time_median(cfg.repeats, || {
                    let mut s = st.clone();
                    model
                        .step(&store, &mut s, last.question, last.concept)
                        .map(|_| ())
                })?
            }
            Arch::Attention => {
                time_median(cfg.repeats, || model.predict(&store, &seq).map(|_| ()))?
            }
        };
    }
    Ok(BenchRecord {
        model: arch,
        t_len,
        train_step_s,
        infer_step_s,
        tape_scalars,
        params,
        state_scalars,
    })
}

pub fn run<F: Float>(cfg: &BenchConfig, timed: bool) -> Result<Vec<BenchRecord>> {
    let mut out = Vec::new();
    for &arch in &cfg.models {
        for &t in &cfg.seqlens {
            out.push(bench_one::<F>(cfg, arch, t, timed)?);
        }
    }
    Ok(out)
}

pub fn to_csv(records: &[BenchRecord]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in records {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

/// Human-readable table, with the growth factor of the tape count relative
/// to the previous sequence length of the same model.
pub fn to_table(records: &[BenchRecord]) -> String {
    let mut s = format!(
        "{:<10} {:>6} {:>14} {:>14} {:>14} {:>8} {:>10} {:>8}\n",
        "model", "T", "train_step_s", "infer_step_s", "tape_scalars", "growth", "params", "state"
    );
    for (i, r) in records.iter().enumerate() {
        let growth = match i.checked_sub(1).map(|j| &records[j]) {
            Some(p) if p.model == r.model => {
                format!("{:.3}x", r.tape_scalars as f64 / p.tape_scalars as f64)
            }
            _ => "-".into(),
        };
        let state = r.state_scalars.map_or("-".into(), |v| v.to_string());
        let _ = writeln!(
            s,
            "{:<10} {:>6} {:>14.6} {:>14.6} {:>14} {:>8} {:>10} {:>8}",
            r.model.to_string(),
            r.t_len,
            r.train_step_s,
            r.infer_step_s,
            r.tape_scalars,
            growth,
            r.params,
            state
        );
    }
    s
}
