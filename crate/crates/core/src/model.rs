//! The knowledge-tracing model: Rasch embeddings, shifted-response input
//! assembly, a stack of sequence-mixing blocks, FFN, and a sigmoid head.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::block::{AttentionBlock, BlockState, Ffn, MambaBlock};
use crate::config::write_key_values;
use crate::data::Interaction;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::Float;
use crate::scan::ScanMode;
use crate::ssm::{S6Config, S6Trace};
use crate::tensor::{kernels, Tensor};

/// Std of the normal initialization of embedding tables.
pub const EMBED_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Arch {
    #[default]
    Mamba,
    Attention,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FfnPlacement {
    /// One FFN after every block.
    #[default]
    PerBlock,
    /// A single FFN after the whole stack.
    Final,
}

macro_rules! text_enum {
    ($t:ty, $what:literal, $($v:path => $s:literal),+) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($v => $s),+ })
            }
        }
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($v),)+
                    other => Err(Error::Config(format!(concat!("unknown ", $what, " {:?}"), other))),
                }
            }
        }
    };
}

text_enum!(Arch, "model kind", Arch::Mamba => "mamba", Arch::Attention => "attention");
text_enum!(FfnPlacement, "ffn placement", FfnPlacement::PerBlock => "per-block", FfnPlacement::Final => "final");

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_questions: usize,
    pub n_concepts: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub expand: usize,
    pub n_state: usize,
    pub conv_kernel: usize,
    pub use_ffn: bool,
    pub use_rasch: bool,
    pub ffn_placement: FfnPlacement,
    /// Feed `[f_t, Q_t]` to the head instead of `f_t` alone.
    pub head_concat_question: bool,
    pub lambda: f64,
    /// Drop rate on the block inputs and mixer outputs during training.
    pub dropout: f64,
    pub max_seq_len: usize,
    pub use_skip: bool,
    pub freeze_a: bool,
    pub scan_mode: ScanMode,
    pub arch: Arch,
}

impl ModelConfig {
    pub fn new(n_questions: usize, n_concepts: usize) -> Self {
        Self {
            n_questions,
            n_concepts,
            d_model: 128,
            n_layers: 5,
            expand: 2,
            n_state: 16,
            conv_kernel: 4,
            use_ffn: true,
            use_rasch: true,
            ffn_placement: FfnPlacement::PerBlock,
            head_concat_question: false,
            lambda: 1e-5,
            dropout: 0.0,
            max_seq_len: 200,
            use_skip: false,
            freeze_a: false,
            scan_mode: ScanMode::Parallel,
            arch: Arch::Mamba,
        }
    }

    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_questions == 0 || self.n_concepts == 0 {
            return bad("vocabulary must not be empty");
        }
        if self.d_model == 0 || self.n_layers == 0 || self.expand == 0 || self.n_state == 0 {
            return bad("d_model, n_layers, expand and n_state must be positive");
        }
        if self.conv_kernel == 0 {
            return bad("conv_kernel must be positive");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be a finite non-negative number");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        Ok(())
    }

    pub fn to_key_values(&self) -> String {
        write_key_values([
            ("arch", self.arch.to_string()),
            ("n_questions", self.n_questions.to_string()),
            ("n_concepts", self.n_concepts.to_string()),
            ("d_model", self.d_model.to_string()),
            ("n_layers", self.n_layers.to_string()),
            ("expand", self.expand.to_string()),
            ("n_state", self.n_state.to_string()),
            ("conv_kernel", self.conv_kernel.to_string()),
            ("use_ffn", self.use_ffn.to_string()),
            ("use_rasch", self.use_rasch.to_string()),
            ("ffn_placement", self.ffn_placement.to_string()),
            (
                "head_concat_question",
                self.head_concat_question.to_string(),
            ),
            ("lambda", format!("{:e}", self.lambda)),
            ("dropout", self.dropout.to_string()),
            ("max_seq_len", self.max_seq_len.to_string()),
            ("use_skip", self.use_skip.to_string()),
            ("freeze_a", self.freeze_a.to_string()),
            ("scan_mode", self.scan_mode.to_string()),
        ])
    }

    /// Overrides fields from parsed `key = value` pairs; unknown keys are
    /// ignored so that a run config can carry trainer settings too.
    pub fn apply(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        fn parse<T: FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value for {k}: {v:?}")))
        }
        for (k, v) in kv {
            let v = v.as_str();
            match k.as_str() {
                "arch" => self.arch = v.parse()?,
                "n_questions" => self.n_questions = parse(k, v)?,
                "n_concepts" => self.n_concepts = parse(k, v)?,
                "d_model" => self.d_model = parse(k, v)?,
                "n_layers" => self.n_layers = parse(k, v)?,
                "expand" => self.expand = parse(k, v)?,
                "n_state" => self.n_state = parse(k, v)?,
                "conv_kernel" => self.conv_kernel = parse(k, v)?,
                "use_ffn" => self.use_ffn = parse(k, v)?,
                "use_rasch" => self.use_rasch = parse(k, v)?,
                "ffn_placement" => self.ffn_placement = v.parse()?,
                "head_concat_question" => self.head_concat_question = parse(k, v)?,
                "lambda" => self.lambda = parse(k, v)?,
                "dropout" => self.dropout = parse(k, v)?,
                "max_seq_len" => self.max_seq_len = parse(k, v)?,
                "use_skip" => self.use_skip = parse(k, v)?,
                "freeze_a" => self.freeze_a = parse(k, v)?,
                "scan_mode" => self.scan_mode = v.parse().map_err(Error::Config)?,
                _ => {}
            }
        }
        Ok(())
    }
}

/// `Q_t = c_{c_t} + μ_{q_t}·d_{c_t}` and `R_t = e_{r_t} + μ_{q_t}·f_{(c_t, r_t)}`.
#[derive(Clone, Debug)]
pub struct RaschEmbeddings {
    pub n_questions: usize,
    pub n_concepts: usize,
    pub concept: ParamId,
    pub response: ParamId,
    pub rasch: Option<RaschTerms>,
}

#[derive(Clone, Debug)]
pub struct RaschTerms {
    /// `(|C|, D)`
    pub concept_var: ParamId,
    /// `(2·|C|, D)`, row `2c + r`.
    pub response_var: ParamId,
    /// `(|Q|, 1)`
    pub difficulty: ParamId,
}

impl RaschEmbeddings {
    pub fn new<F: Float>(cfg: &ModelConfig, store: &mut ParamStore<F>, rng: &mut Rng) -> Self {
        let (nq, nc, d) = (cfg.n_questions, cfg.n_concepts, cfg.d_model);
        let concept = store.add_normal("embed.concept", vec![nc, d], EMBED_INIT_STD, rng);
        let response = store.add_normal("embed.response", vec![2, d], EMBED_INIT_STD, rng);
        let rasch = cfg.use_rasch.then(|| RaschTerms {
            concept_var: store.add_normal("embed.concept_var", vec![nc, d], EMBED_INIT_STD, rng),
            response_var: store.add_normal(
                "embed.response_var",
                vec![2 * nc, d],
                EMBED_INIT_STD,
                rng,
            ),
            difficulty: store.add("embed.difficulty", Tensor::zeros(vec![nq, 1])),
        });
        Self {
            n_questions: nq,
            n_concepts: nc,
            concept,
            response,
            rasch,
        }
    }

    pub fn check_ids(&self, seq: &[Interaction]) -> Result<()> {
        for (pos, it) in seq.iter().enumerate() {
            let out = |kind, id, size| {
                Err(Error::IdOutOfRange {
                    kind,
                    id,
                    pos,
                    size,
                })
            };
            if it.question >= self.n_questions {
                return out("question", it.question, self.n_questions);
            }
            if it.concept >= self.n_concepts {
                return out("concept", it.concept, self.n_concepts);
            }
            if it.response > 1 {
                return out("response", it.response as usize, 2);
            }
        }
        Ok(())
    }

    /// Returns `(Q, R)`, each `(T, D)`.
    pub fn embed<'a, F: Float>(
        &self,
        store: &'a ParamStore<F>,
        tape: &mut Tape<'a, F>,
        seq: &[Interaction],
    ) -> Result<(Var, Var)> {
        self.check_ids(seq)?;
        let concepts: Vec<usize> = seq.iter().map(|i| i.concept).collect();
        let responses: Vec<usize> = seq.iter().map(|i| i.response as usize).collect();
        let ct = tape.param(store, self.concept);
        let et = tape.param(store, self.response);
        let mut q = tape.gather_rows(ct, &concepts)?;
        let mut r = tape.gather_rows(et, &responses)?;
        if let Some(rt) = &self.rasch {
            let questions: Vec<usize> = seq.iter().map(|i| i.question).collect();
            let pair: Vec<usize> = seq
                .iter()
                .map(|i| 2 * i.concept + i.response as usize)
                .collect();
            let mu = tape.param(store, rt.difficulty);
            let mu = tape.gather_rows(mu, &questions)?;
            let dt = tape.param(store, rt.concept_var);
            let dv = tape.gather_rows(dt, &concepts)?;
            let dv = tape.mul_col(dv, mu)?;
            q = tape.add(q, dv)?;
            let ft = tape.param(store, rt.response_var);
            let fv = tape.gather_rows(ft, &pair)?;
            let fv = tape.mul_col(fv, mu)?;
            r = tape.add(r, fv)?;
        }
        Ok((q, r))
    }

    fn embed_row<F: Float>(
        &self,
        store: &ParamStore<F>,
        it: &Interaction,
        response: bool,
    ) -> Vec<F> {
        let d = store.get(self.concept).cols();
        let (table, var, row) = if response {
            (
                self.response,
                self.rasch.as_ref().map(|r| r.response_var),
                it.response as usize,
            )
        } else {
            (
                self.concept,
                self.rasch.as_ref().map(|r| r.concept_var),
                it.concept,
            )
        };
        let mut out = store.get(table).row(row).to_vec();
        if let (Some(var), Some(rt)) = (var, &self.rasch) {
            let mu = store.get(rt.difficulty).data()[it.question];
            let vrow = if response {
                2 * it.concept + it.response as usize
            } else {
                it.concept
            };
            for (o, &v) in out
                .iter_mut()
                .zip(&store.get(var).data()[vrow * d..(vrow + 1) * d])
            {
                *o += mu * v;
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub enum Mixer {
    Mamba(MambaBlock),
    Attention(AttentionBlock),
}

#[derive(Clone, Debug)]
pub struct Layer {
    pub mixer: Mixer,
    pub ffn: Option<Ffn>,
}

/// Parameter handles and wiring of a full model; the values live in a
/// [`ParamStore`].
#[derive(Clone, Debug)]
pub struct KtModel {
    pub config: ModelConfig,
    pub embed: RaschEmbeddings,
    /// Stands in for the response embedding before the first step.
    pub start: ParamId,
    pub layers: Vec<Layer>,
    pub final_ffn: Option<Ffn>,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

/// Per-layer S6 captures from a traced forward pass.
pub type ModelTrace<F> = Vec<Option<S6Trace<F>>>;

impl KtModel {
    pub fn new<F: Float>(
        config: ModelConfig,
        store: &mut ParamStore<F>,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let embed = RaschEmbeddings::new(&config, store, rng);
        let start = store.add_normal("embed.start", vec![1, d], EMBED_INIT_STD, rng);
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let prefix = format!("layer{l}");
            let mixer = match config.arch {
                Arch::Mamba => {
                    let s6 = S6Config {
                        n_state: config.n_state,
                        use_skip: config.use_skip,
                        freeze_a: config.freeze_a,
                        ..S6Config::new(config.d_inner())
                    };
                    Mixer::Mamba(MambaBlock::new(
                        d,
                        config.expand,
                        config.conv_kernel,
                        s6,
                        &prefix,
                        store,
                        rng,
                    )?)
                }
                Arch::Attention => Mixer::Attention(AttentionBlock::new(d, &prefix, store, rng)),
            };
            let ffn = (config.use_ffn && config.ffn_placement == FfnPlacement::PerBlock)
                .then(|| Ffn::new(d, &format!("{prefix}.ffn"), store, rng));
            layers.push(Layer { mixer, ffn });
        }
        let final_ffn = (config.use_ffn && config.ffn_placement == FfnPlacement::Final)
            .then(|| Ffn::new(d, "final_ffn", store, rng));
        let head_in = if config.head_concat_question {
            2 * d
        } else {
            d
        };
        let head_w = store.add_linear("head.w", head_in, 1, rng);
        let head_b = store.add("head.b", Tensor::zeros(vec![1]));
        Ok(Self {
            config,
            embed,
            start,
            layers,
            final_ffn,
            head_w,
            head_b,
        })
    }

    /// Builds a model and a fresh store from a seed.
    pub fn init<F: Float>(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore<F>)> {
        let mut store = ParamStore::new();
        let model = Self::new(config, &mut store, &mut Rng::new(seed))?;
        Ok((model, store))
    }

    /// `input_t = Q_t + R_{t−1}`, with a learned start vector at `t = 0`.
    pub fn build_inputs<'a, F: Float>(
        &self,
        store: &'a ParamStore<F>,
        tape: &mut Tape<'a, F>,
        q: Var,
        r: Var,
    ) -> Result<Var> {
        let t_len = tape.shape(q)[0];
        let start = tape.param(store, self.start);
        let shifted = if t_len > 1 {
            let prev = tape.slice_rows(r, 0, t_len - 1)?;
            tape.concat_rows(&[start, prev])?
        } else {
            start
        };
        tape.add(q, shifted)
    }

    /// Probabilities `(T, 1)` of a correct response at every position.
    pub fn forward<'a, F: Float>(
        &self,
        store: &'a ParamStore<F>,
        tape: &mut Tape<'a, F>,
        seq: &[Interaction],
    ) -> Result<Var> {
        self.forward_traced(store, tape, seq, None)
    }

    pub fn forward_traced<'a, F: Float>(
        &self,
        store: &'a ParamStore<F>,
        tape: &mut Tape<'a, F>,
        seq: &[Interaction],
        trace: Option<&mut ModelTrace<F>>,
    ) -> Result<Var> {
        self.forward_impl(store, tape, seq, trace, None)
    }

    /// Training-mode pass: dropout masks are drawn from `rng` when the
    /// configured rate is positive.
    pub fn forward_train<'a, F: Float>(
        &self,
        store: &'a ParamStore<F>,
        tape: &mut Tape<'a, F>,
        seq: &[Interaction],
        rng: &mut Rng,
    ) -> Result<Var> {
        self.forward_impl(store, tape, seq, None, Some(rng))
    }

    fn forward_impl<'a, F: Float>(
        &self,
        store: &'a ParamStore<F>,
        tape: &mut Tape<'a, F>,
        seq: &[Interaction],
        mut trace: Option<&mut ModelTrace<F>>,
        mut rng: Option<&mut Rng>,
    ) -> Result<Var> {
        if seq.is_empty() {
            return Err(Error::invalid("forward", "empty sequence"));
        }
        if let Some(tr) = trace.as_deref_mut() {
            tr.clear();
            tr.resize(self.layers.len(), None);
        }
        let (q, r) = self.embed.embed(store, tape, seq)?;
        let mut h = self.build_inputs(store, tape, q, r)?;
        h = self.dropout(tape, h, rng.as_deref_mut())?;
        for (l, layer) in self.layers.iter().enumerate() {
            h = match &layer.mixer {
                Mixer::Mamba(b) => {
                    let slot = trace.as_deref_mut().map(|tr| &mut tr[l]);
                    b.forward(store, tape, h, self.config.scan_mode, slot)?
                }
                Mixer::Attention(b) => b.forward(store, tape, h)?,
            };
            h = self.dropout(tape, h, rng.as_deref_mut())?;
            if let Some(ffn) = &layer.ffn {
                h = ffn.forward_residual(store, tape, h)?;
            }
        }
        if let Some(ffn) = &self.final_ffn {
            h = ffn.forward_residual(store, tape, h)?;
        }
        if self.config.head_concat_question {
            h = tape.concat_cols(&[h, q])?;
        }
        let w = tape.param(store, self.head_w);
        let b = tape.param(store, self.head_b);
        let logits = tape.matmul(h, w)?;
        let logits = tape.add_row(logits, b)?;
        Ok(tape.sigmoid(logits))
    }

    /// Inverted dropout: zeroes each entry with probability `p` and scales
    /// the rest by `1/(1 − p)`. Identity without an RNG or at `p = 0`.
    fn dropout<F: Float>(
        &self,
        tape: &mut Tape<'_, F>,
        x: Var,
        rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let p = self.config.dropout;
        let Some(rng) = rng.filter(|_| p > 0.0) else {
            return Ok(x);
        };
        let shape = tape.shape(x).to_vec();
        let keep = F::from_f64_lossy(1.0 / (1.0 - p));
        let n = shape.iter().product();
        let mask = (0..n)
            .map(|_| if rng.uniform() < p { F::zero() } else { keep })
            .collect();
        let mask = tape.constant(Tensor::new(shape, mask)?);
        tape.mul(x, mask)
    }

    /// Forward pass without a gradient tape.
    pub fn predict<F: Float>(&self, store: &ParamStore<F>, seq: &[Interaction]) -> Result<Vec<F>> {
        let mut tape = Tape::no_grad();
        let p = self.forward(store, &mut tape, seq)?;
        Ok(tape.value(p).data().to_vec())
    }

    /// Summed cross-entropy over `seq`.
    pub fn bce<'a, F: Float>(
        &self,
        store: &'a ParamStore<F>,
        tape: &mut Tape<'a, F>,
        seq: &[Interaction],
    ) -> Result<Var> {
        let p = self.forward(store, tape, seq)?;
        self.bce_of(tape, p, seq)
    }

    /// Summed cross-entropy of a training-mode pass.
    pub fn bce_train<'a, F: Float>(
        &self,
        store: &'a ParamStore<F>,
        tape: &mut Tape<'a, F>,
        seq: &[Interaction],
        rng: &mut Rng,
    ) -> Result<Var> {
        let p = self.forward_train(store, tape, seq, rng)?;
        self.bce_of(tape, p, seq)
    }

    fn bce_of<F: Float>(&self, tape: &mut Tape<'_, F>, p: Var, seq: &[Interaction]) -> Result<Var> {
        let target: Vec<F> = seq
            .iter()
            .map(|i| F::from_f64_lossy(i.response as f64))
            .collect();
        tape.bce_sum(p, &target)
    }

    /// `λ·‖μ‖²`, or `None` when the model has no difficulty parameters.
    pub fn regularizer<'a, F: Float>(
        &self,
        store: &'a ParamStore<F>,
        tape: &mut Tape<'a, F>,
    ) -> Option<Var> {
        let rt = self.embed.rasch.as_ref()?;
        let mu = tape.param(store, rt.difficulty);
        let sq = tape.mul(mu, mu).expect("same shape");
        let s = tape.sum(sq);
        Some(tape.scale(s, F::from_f64_lossy(self.config.lambda)))
    }

    /// Cross-entropy plus the difficulty penalty for one sequence.
    pub fn loss<'a, F: Float>(
        &self,
        store: &'a ParamStore<F>,
        tape: &mut Tape<'a, F>,
        seq: &[Interaction],
    ) -> Result<Var> {
        let l = self.bce(store, tape, seq)?;
        match self.regularizer(store, tape) {
            Some(reg) => tape.add(l, reg),
            None => Ok(l),
        }
    }

    pub fn init_state<F: Float>(&self, store: &ParamStore<F>) -> Result<ModelState<F>> {
        let blocks = self
            .layers
            .iter()
            .map(|l| match &l.mixer {
                Mixer::Mamba(b) => Ok(b.init_state()),
                Mixer::Attention(_) => Err(Error::invalid(
                    "step",
                    "the attention baseline has no recurrent form",
                )),
            })
            .collect::<Result<_>>()?;
        Ok(ModelState {
            blocks,
            prev_response: store.get(self.start).data().to_vec(),
        })
    }

    /// Predicts the next response from the state. Call [`Self::observe`]
    /// afterwards to feed the actual outcome.
    pub fn step<F: Float>(
        &self,
        store: &ParamStore<F>,
        state: &mut ModelState<F>,
        question: usize,
        concept: usize,
    ) -> Result<F> {
        let it = Interaction {
            question,
            concept,
            response: 0,
        };
        self.embed.check_ids(&[it])?;
        let qv = self.embed.embed_row(store, &it, false);
        let mut h: Vec<F> = qv
            .iter()
            .zip(&state.prev_response)
            .map(|(&a, &b)| a + b)
            .collect();
        for (layer, st) in self.layers.iter().zip(&mut state.blocks) {
            if let Mixer::Mamba(b) = &layer.mixer {
                h = b.step(store, st, &h)?;
            }
            if let Some(ffn) = &layer.ffn {
                h = ffn.step_residual(store, &h);
            }
        }
        if let Some(ffn) = &self.final_ffn {
            h = ffn.step_residual(store, &h);
        }
        if self.config.head_concat_question {
            h.extend_from_slice(&qv);
        }
        let logit = kernels::matmul(&h, store.get(self.head_w).data(), 1, h.len(), 1)[0]
            + store.get(self.head_b).data()[0];
        Ok(kernels::sigmoid(logit))
    }

    pub fn observe<F: Float>(
        &self,
        store: &ParamStore<F>,
        state: &mut ModelState<F>,
        it: Interaction,
    ) -> Result<()> {
        self.embed.check_ids(&[it])?;
        state.prev_response = self.embed.embed_row(store, &it, true);
        Ok(())
    }

    /// Parameters that enter the λ penalty.
    pub fn difficulty(&self) -> Option<ParamId> {
        self.embed.rasch.as_ref().map(|r| r.difficulty)
    }
}

/// Recurrent inference state: one entry per block plus the pending
/// response embedding. Its size is independent of the sequence length.
#[derive(Clone, Debug)]
pub struct ModelState<F> {
    blocks: Vec<BlockState<F>>,
    prev_response: Vec<F>,
}

impl<F> ModelState<F> {
    pub fn num_scalars(&self) -> usize {
        self.blocks
            .iter()
            .map(BlockState::num_scalars)
            .sum::<usize>()
            + self.prev_response.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 2,
            n_state: 4,
            ..ModelConfig::new(12, 4)
        }
    }

    #[test]
    fn dropout_only_acts_in_training_mode() {
        let s = seq(10, 3);
        let (m0, store) = KtModel::init::<f64>(tiny(), 2).unwrap();
        let mut tape = Tape::new();
        let plain = m0.bce(&store, &mut tape, &s).unwrap();
        let plain = tape.value(plain).item();
        let mut tape = Tape::new();
        let l = m0
            .bce_train(&store, &mut tape, &s, &mut Rng::new(1))
            .unwrap();
        assert_eq!(tape.value(l).item().to_bits(), plain.to_bits());

        let m = KtModel {
            config: ModelConfig {
                dropout: 0.5,
                ..tiny()
            },
            ..m0
        };
        let train_loss = |seed| {
            let mut tape = Tape::new();
            let l = m
                .bce_train(&store, &mut tape, &s, &mut Rng::new(seed))
                .unwrap();
            tape.value(l).item()
        };
        assert_eq!(train_loss(1), train_loss(1));
        assert_ne!(train_loss(1), plain);
        assert_ne!(train_loss(1), train_loss(2));
        let mut tape = Tape::new();
        let l = m.bce(&store, &mut tape, &s).unwrap();
        assert_eq!(tape.value(l).item(), plain);
    }

    fn seq(t: usize, seed: u64) -> Vec<Interaction> {
        let mut rng = Rng::new(seed);
        (0..t)
            .map(|_| {
                let q = rng.below(12);
                Interaction {
                    question: q,
                    concept: q % 4,
                    response: rng.below(2) as u8,
                }
            })
            .collect()
    }

    #[test]
    fn output_length_and_range() {
        let (m, store) = KtModel::init::<f64>(tiny(), 1).unwrap();
        for t in [1, 2, 7, 33] {
            let p = m.predict(&store, &seq(t, t as u64)).unwrap();
            assert_eq!(p.len(), t);
            assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn zero_head_gives_one_half() {
        let (m, mut store) = KtModel::init::<f64>(tiny(), 1).unwrap();
        *store.get_mut(m.head_w) = Tensor::zeros(vec![8, 1]);
        let p = m.predict(&store, &seq(9, 3)).unwrap();
        assert!(p.iter().all(|&v| v == 0.5));
        let mut tape = Tape::new();
        let s = seq(9, 3);
        let l = m.bce(&store, &mut tape, &s).unwrap();
        assert!((tape.value(l).item() - 9.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_difficulty_leaves_plain_concept_embedding() {
        let (m, store) = KtModel::init::<f64>(tiny(), 1).unwrap();
        let s = seq(5, 2);
        let mut tape = Tape::new();
        let (q, _) = m.embed.embed(&store, &mut tape, &s).unwrap();
        for (t, it) in s.iter().enumerate() {
            assert_eq!(
                tape.value(q).row(t),
                store.get(m.embed.concept).row(it.concept)
            );
        }
    }

    #[test]
    fn questions_sharing_a_concept_differ_by_difficulty_times_variation() {
        let (m, mut store) = KtModel::init::<f64>(tiny(), 1).unwrap();
        let mu = m.difficulty().unwrap();
        store.get_mut(mu).data_mut()[1] = 0.7;
        store.get_mut(mu).data_mut()[5] = -0.4;
        let s = [
            Interaction {
                question: 1,
                concept: 1,
                response: 0,
            },
            Interaction {
                question: 5,
                concept: 1,
                response: 0,
            },
        ];
        let mut tape = Tape::new();
        let (q, _) = m.embed.embed(&store, &mut tape, &s).unwrap();
        let dv = store
            .get(m.embed.rasch.as_ref().unwrap().concept_var)
            .row(1)
            .to_vec();
        let (r0, r1) = (tape.value(q).row(0), tape.value(q).row(1));
        for ((a, b), v) in r0.iter().zip(r1).zip(&dv) {
            assert!((a - b - 1.1 * v).abs() < 1e-15);
        }
    }

    #[test]
    fn out_of_range_ids_report_position() {
        let (m, store) = KtModel::init::<f64>(tiny(), 1).unwrap();
        let mut s = seq(4, 1);
        s[2].question = 12;
        match m.predict(&store, &s) {
            Err(Error::IdOutOfRange {
                kind: "question",
                pos: 2,
                ..
            }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn single_step_input_is_question_plus_start() {
        let (m, store) = KtModel::init::<f64>(tiny(), 1).unwrap();
        let s = seq(1, 4);
        let mut tape = Tape::new();
        let (q, r) = m.embed.embed(&store, &mut tape, &s).unwrap();
        let x = m.build_inputs(&store, &mut tape, q, r).unwrap();
        let want: Vec<f64> = tape
            .value(q)
            .data()
            .iter()
            .zip(store.get(m.start).data())
            .map(|(a, b)| a + b)
            .collect();
        assert_eq!(tape.value(x).data(), &want[..]);
    }

    #[test]
    fn response_flip_never_reaches_its_own_position() {
        let (m, store) = KtModel::init::<f64>(tiny(), 1).unwrap();
        let s = seq(10, 9);
        let base = m.predict(&store, &s).unwrap();
        for t in 0..10 {
            let mut s2 = s.clone();
            s2[t].response ^= 1;
            let p = m.predict(&store, &s2).unwrap();
            assert_eq!(&p[..=t], &base[..=t]);
            if t + 1 < 10 {
                assert_ne!(p[t + 1], base[t + 1]);
            }
        }
    }

    #[test]
    fn recurrent_steps_match_sequential_forward() {
        for ffn_placement in [FfnPlacement::PerBlock, FfnPlacement::Final] {
            for head_concat_question in [false, true] {
                let cfg = ModelConfig {
                    scan_mode: ScanMode::Sequential,
                    ffn_placement,
                    head_concat_question,
                    ..tiny()
                };
                let (m, mut store) = KtModel::init::<f64>(cfg, 2).unwrap();
                store.get_mut(m.difficulty().unwrap()).data_mut()[3] = 0.5;
                let s = seq(20, 5);
                let full = m.predict(&store, &s).unwrap();
                let mut st = m.init_state(&store).unwrap();
                let n0 = st.num_scalars();
                for (t, it) in s.iter().enumerate() {
                    let p = m.step(&store, &mut st, it.question, it.concept).unwrap();
                    assert!((p - full[t]).abs() < 1e-12, "t={t}: {p} vs {}", full[t]);
                    m.observe(&store, &mut st, *it).unwrap();
                    assert_eq!(st.num_scalars(), n0);
                }
            }
        }
    }

    #[test]
    fn attention_model_is_causal() {
        let cfg = ModelConfig {
            arch: Arch::Attention,
            ..tiny()
        };
        let (m, store) = KtModel::init::<f64>(cfg, 2).unwrap();
        assert!(m.init_state(&store).is_err());
        let s = seq(12, 1);
        let base = m.predict(&store, &s).unwrap();
        for t in 0..11 {
            let mut s2 = s.clone();
            s2[t + 1].question = (s2[t + 1].question + 1) % 12;
            s2[t].response ^= 1;
            assert_eq!(&m.predict(&store, &s2).unwrap()[..=t], &base[..=t]);
        }
    }

    #[test]
    fn ablation_parameter_counts() {
        let full = KtModel::init::<f64>(tiny(), 1).unwrap().1.num_scalars();
        let cfg = |use_ffn, use_rasch| ModelConfig {
            use_ffn,
            use_rasch,
            ..tiny()
        };
        let no_rasch = KtModel::init::<f64>(cfg(true, false), 1)
            .unwrap()
            .1
            .num_scalars();
        let no_ffn = KtModel::init::<f64>(cfg(false, true), 1)
            .unwrap()
            .1
            .num_scalars();
        let neither = KtModel::init::<f64>(cfg(false, false), 1)
            .unwrap()
            .1
            .num_scalars();
        assert_eq!(full - no_rasch, 12 + 3 * 8 * 4);
        assert_eq!(full - no_ffn, 2 * Ffn::num_params(8));
        assert_eq!(full - neither, 12 + 3 * 8 * 4 + 2 * Ffn::num_params(8));
    }

    #[test]
    fn regularizer_only_touches_difficulty() {
        let (m, mut store) = KtModel::init::<f64>(
            ModelConfig {
                lambda: 0.5,
                ..tiny()
            },
            1,
        )
        .unwrap();
        let mu = m.difficulty().unwrap();
        store.get_mut(mu).data_mut()[2] = 2.0;
        let mut tape = Tape::new();
        let reg = m.regularizer(&store, &mut tape).unwrap();
        assert_eq!(tape.value(reg).item(), 2.0);
        let g = tape.backward(reg).unwrap().into_param_grads(store.len());
        for id in store.ids() {
            match g.get(id) {
                Some(t) if id == mu => assert_eq!(t.data()[2], 2.0),
                Some(t) => assert!(t.data().iter().all(|&v| v == 0.0)),
                None => {}
            }
        }
    }

    #[test]
    fn config_round_trips_through_text() {
        let cfg = ModelConfig {
            arch: Arch::Attention,
            ffn_placement: FfnPlacement::Final,
            lambda: 3e-4,
            scan_mode: ScanMode::Sequential,
            ..tiny()
        };
        let kv = crate::config::parse_key_values(&cfg.to_key_values(), "t").unwrap();
        let mut back = ModelConfig::new(1, 1);
        back.apply(&kv).unwrap();
        assert_eq!(back, cfg);
    }
}
