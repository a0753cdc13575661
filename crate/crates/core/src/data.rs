//! Interaction logs: CSV ingestion, vocabularies, windowing, splits,
//! batching, persisted datasets and a synthetic generator with known signal.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics;
use crate::rng::Rng;
use crate::tensor::kernels::sigmoid;

/// Required CSV header; a fifth `timestamp` column is optional.
pub const CSV_HEADER: [&str; 4] = ["student_id", "question_id", "concept_id", "response"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Interaction {
    pub question: usize,
    pub concept: usize,
    pub response: u8,
}

/// One student's interactions in order, with dense ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionSequence {
    pub student_id: String,
    pub items: Vec<Interaction>,
}

impl InteractionSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VocabKind {
    Question,
    Concept,
}

impl VocabKind {
    fn as_str(self) -> &'static str {
        match self {
            VocabKind::Question => "question",
            VocabKind::Concept => "concept",
        }
    }
}

/// Bijection between raw ids and dense ids, assigned in order of first
/// appearance.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IdMap {
    raw: Vec<String>,
    dense: HashMap<String, usize>,
}

impl IdMap {
    pub fn intern(&mut self, raw: &str) -> usize {
        if let Some(&d) = self.dense.get(raw) {
            return d;
        }
        self.raw.push(raw.to_string());
        self.dense.insert(raw.to_string(), self.raw.len() - 1);
        self.raw.len() - 1
    }

    pub fn dense(&self, raw: &str) -> Option<usize> {
        self.dense.get(raw).copied()
    }

    pub fn raw(&self, dense: usize) -> Option<&str> {
        self.raw.get(dense).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vocab {
    pub questions: IdMap,
    pub concepts: IdMap,
}

impl Vocab {
    /// Writes `kind,raw_id,dense_id` lines under a header of the same names.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["kind", "raw_id", "dense_id"])
            .map_err(|e| csv_err(path, e))?;
        for (kind, map) in [
            (VocabKind::Question, &self.questions),
            (VocabKind::Concept, &self.concepts),
        ] {
            for (i, raw) in map.raw.iter().enumerate() {
                w.write_record([kind.as_str(), raw, &i.to_string()])
                    .map_err(|e| csv_err(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let mut v = Vocab::default();
        for (i, rec) in r.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| csv_err(path, e))?;
            let fail = |msg: String| Error::Format {
                path: path.display().to_string(),
                line,
                msg,
            };
            if rec.len() != 3 {
                return Err(fail(format!("expected 3 fields, got {}", rec.len())));
            }
            let dense: usize = rec[2]
                .parse()
                .map_err(|_| fail(format!("bad dense id {:?}", &rec[2])))?;
            let map = match &rec[0] {
                "question" => &mut v.questions,
                "concept" => &mut v.concepts,
                other => return Err(fail(format!("unknown kind {other:?}"))),
            };
            if map.intern(&rec[1]) != dense {
                return Err(fail(format!("dense ids must be contiguous, got {dense}")));
            }
        }
        Ok(v)
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Format {
        path: path.display().to_string(),
        line,
        msg: e.to_string(),
    }
}

/// Reads an interaction CSV, groups rows by student (students in order of
/// first appearance, rows in file order or by `timestamp` when present) and
/// densely re-indexes questions and concepts.
pub fn load_interactions(path: &Path) -> Result<(Vec<InteractionSequence>, Vocab)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(&text, &path.display().to_string())
}

pub fn parse_interactions(text: &str, source: &str) -> Result<(Vec<InteractionSequence>, Vocab)> {
    let fail = |line: usize, msg: String| Error::Format {
        path: source.to_string(),
        line,
        msg,
    };
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| fail(1, e.to_string()))?.clone();
    let cols: Vec<&str> = header.iter().collect();
    let has_ts = match cols.as_slice() {
        [a, b, c, d] if [*a, *b, *c, *d] == CSV_HEADER => false,
        [a, b, c, d, "timestamp"] if [*a, *b, *c, *d] == CSV_HEADER => true,
        _ => {
            return Err(fail(
                1,
                format!(
                    "header must be exactly {} (optionally followed by timestamp), got {:?}",
                    CSV_HEADER.join(","),
                    cols.join(",")
                ),
            ))
        }
    };

    let mut vocab = Vocab::default();
    let mut students = IdMap::default();
    let mut rows: Vec<Vec<(f64, Interaction)>> = Vec::new();
    let mut question_concept: HashMap<usize, usize> = HashMap::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| fail(line, e.to_string()))?;
        if rec.len() != cols.len() {
            return Err(fail(
                line,
                format!("expected {} fields, got {}", cols.len(), rec.len()),
            ));
        }
        if rec.iter().take(4).any(|f| f.is_empty()) {
            return Err(fail(line, "empty field".into()));
        }
        let response = match &rec[3] {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(fail(
                    line,
                    format!("response must be 0 or 1, got {other:?}"),
                ))
            }
        };
        let ts = if has_ts {
            rec[4]
                .trim()
                .parse::<f64>()
                .map_err(|_| fail(line, format!("bad timestamp {:?}", &rec[4])))?
        } else {
            0.0
        };
        let s = students.intern(&rec[0]);
        if s == rows.len() {
            rows.push(Vec::new());
        }
        let question = vocab.questions.intern(&rec[1]);
        let concept = vocab.concepts.intern(&rec[2]);
        match question_concept.get(&question) {
            Some(&c) if c != concept => {
                return Err(fail(
                    line,
                    format!(
                        "question {:?} already tagged with concept {:?}; multi-concept questions are not supported",
                        &rec[1],
                        vocab.concepts.raw(c).unwrap_or("?")
                    ),
                ))
            }
            _ => {
                question_concept.insert(question, concept);
            }
        }
        rows[s].push((
            ts,
            Interaction {
                question,
                concept,
                response,
            },
        ));
    }

    let seqs = rows
        .into_iter()
        .enumerate()
        .map(|(s, mut items)| {
            if has_ts {
                items.sort_by(|a, b| a.0.total_cmp(&b.0));
            }
            InteractionSequence {
                student_id: students.raw(s).unwrap().to_string(),
                items: items.into_iter().map(|(_, it)| it).collect(),
            }
        })
        .collect();
    Ok((seqs, vocab))
}

/// Writes sequences as an interaction CSV using raw ids from `vocab` (or the
/// dense ids themselves when `vocab` is `None`).
pub fn write_interactions_csv(
    path: &Path,
    seqs: &[InteractionSequence],
    vocab: Option<&Vocab>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(CSV_HEADER).map_err(|e| csv_err(path, e))?;
    for s in seqs {
        for it in &s.items {
            let (q, c) = match vocab {
                Some(v) => (
                    v.questions.raw(it.question).unwrap_or_default().to_string(),
                    v.concepts.raw(it.concept).unwrap_or_default().to_string(),
                ),
                None => (it.question.to_string(), it.concept.to_string()),
            };
            w.write_record([s.student_id.as_str(), &q, &c, &it.response.to_string()])
                .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// A model-ready window padded to a fixed length; `mask[t]` marks real
/// positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Window {
    pub student_id: String,
    pub question: Vec<usize>,
    pub concept: Vec<usize>,
    pub response: Vec<u8>,
    pub mask: Vec<bool>,
}

impl Window {
    pub fn padded_len(&self) -> usize {
        self.mask.len()
    }

    /// Number of positions up to and including the last valid one.
    pub fn valid_len(&self) -> usize {
        self.mask.iter().rposition(|&m| m).map_or(0, |p| p + 1)
    }

    pub fn num_valid(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Unpadded view.
    pub fn items(&self) -> Vec<Interaction> {
        (0..self.valid_len())
            .map(|t| Interaction {
                question: self.question[t],
                concept: self.concept[t],
                response: self.response[t],
            })
            .collect()
    }

    pub fn from_items(student_id: &str, items: &[Interaction], max_len: usize) -> Self {
        let mut w = Window {
            student_id: student_id.to_string(),
            question: vec![0; max_len],
            concept: vec![0; max_len],
            response: vec![0; max_len],
            mask: vec![false; max_len],
        };
        for (t, it) in items.iter().enumerate().take(max_len) {
            w.question[t] = it.question;
            w.concept[t] = it.concept;
            w.response[t] = it.response;
            w.mask[t] = true;
        }
        w
    }
}

/// Splits each sequence into consecutive non-overlapping windows of at most
/// `max_len` and pads every window to `max_len`.
pub fn window(seqs: &[InteractionSequence], max_len: usize) -> Vec<Window> {
    assert!(max_len > 0, "max_len must be positive");
    seqs.iter()
        .flat_map(|s| {
            s.items
                .chunks(max_len)
                .map(move |chunk| Window::from_items(&s.student_id, chunk, max_len))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Seeded 70/10/20 split by student.
pub fn split<T: Clone>(items: &[T], seed: u64) -> Split<T> {
    let n = items.len();
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut order);
    let n_train = (0.7 * n as f64).round() as usize;
    let n_val = ((0.1 * n as f64).round() as usize).min(n - n_train);
    let pick = |idx: &[usize]| idx.iter().map(|&i| items[i].clone()).collect();
    Split {
        train: pick(&order[..n_train]),
        val: pick(&order[n_train..n_train + n_val]),
        test: pick(&order[n_train + n_val..]),
    }
}

/// Padded `(B, T_max)` id arrays with a mask.
#[derive(Clone, Debug)]
pub struct Batch {
    pub question: Vec<Vec<usize>>,
    pub concept: Vec<Vec<usize>>,
    pub response: Vec<Vec<u8>>,
    pub mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn from_windows(windows: &[&Window]) -> Self {
        let t_max = windows.iter().map(|w| w.padded_len()).max().unwrap_or(0);
        let pad = |v: &[usize]| {
            let mut v = v.to_vec();
            v.resize(t_max, 0);
            v
        };
        Batch {
            question: windows.iter().map(|w| pad(&w.question)).collect(),
            concept: windows.iter().map(|w| pad(&w.concept)).collect(),
            response: windows
                .iter()
                .map(|w| {
                    let mut r = w.response.clone();
                    r.resize(t_max, 0);
                    r
                })
                .collect(),
            mask: windows
                .iter()
                .map(|w| {
                    let mut m = w.mask.clone();
                    m.resize(t_max, false);
                    m
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn num_valid(&self) -> usize {
        self.mask.iter().flatten().filter(|&&m| m).count()
    }
}

// ---- persisted datasets ---------------------------------------------------

pub const DATA_FORMAT: &str = "ssmkt-data-v1";

#[derive(Clone, Debug, PartialEq)]
pub struct DataMeta {
    pub n_questions: usize,
    pub n_concepts: usize,
    pub max_len: usize,
    pub seed: u64,
}

/// Output of `prepare`: vocabulary plus windowed splits.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub meta: DataMeta,
    pub vocab: Vocab,
    pub splits: Split<Window>,
}

impl PreparedData {
    pub fn build(
        seqs: &[InteractionSequence],
        vocab: Vocab,
        max_len: usize,
        seed: u64,
    ) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::EmptyDataset("no interactions".into()));
        }
        let s = split(seqs, seed);
        Ok(PreparedData {
            meta: DataMeta {
                n_questions: vocab.questions.len(),
                n_concepts: vocab.concepts.len(),
                max_len,
                seed,
            },
            vocab,
            splits: Split {
                train: window(&s.train, max_len),
                val: window(&s.val, max_len),
                test: window(&s.test, max_len),
            },
        })
    }

    pub fn split(&self, name: &str) -> Result<&[Window]> {
        match name {
            "train" => Ok(&self.splits.train),
            "val" => Ok(&self.splits.val),
            "test" => Ok(&self.splits.test),
            other => Err(Error::Config(format!(
                "unknown split {other:?} (train, val, test)"
            ))),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = format!(
            "format = {DATA_FORMAT}\nn_questions = {}\nn_concepts = {}\nmax_len = {}\nseed = {}\n",
            self.meta.n_questions, self.meta.n_concepts, self.meta.max_len, self.meta.seed
        );
        let p = dir.join("meta.txt");
        fs::write(&p, meta).map_err(|e| Error::io(p, e))?;
        self.vocab.save(&dir.join("vocab.csv"))?;
        for (name, ws) in [
            ("train", &self.splits.train),
            ("val", &self.splits.val),
            ("test", &self.splits.test),
        ] {
            save_windows(&dir.join(format!("{name}.csv")), ws)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("meta.txt");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let kv = crate::config::parse_key_values(&text, &p.display().to_string())?;
        let get = |k: &str| -> Result<&str> {
            kv.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Config(format!("{}: missing {k}", p.display())))
        };
        if get("format")? != DATA_FORMAT {
            return Err(Error::Config(format!(
                "{}: unsupported format {:?}",
                p.display(),
                get("format")?
            )));
        }
        let num = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Config(format!("{}: bad {k}", p.display())))
        };
        let meta = DataMeta {
            n_questions: num("n_questions")? as usize,
            n_concepts: num("n_concepts")? as usize,
            max_len: num("max_len")? as usize,
            seed: num("seed")?,
        };
        let vocab = Vocab::load(&dir.join("vocab.csv"))?;
        let mut splits = Split {
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for (name, slot) in [
            ("train", &mut splits.train),
            ("val", &mut splits.val),
            ("test", &mut splits.test),
        ] {
            *slot = load_windows(&dir.join(format!("{name}.csv")), meta.max_len)?;
        }
        Ok(PreparedData {
            meta,
            vocab,
            splits,
        })
    }
}

fn save_windows(path: &Path, ws: &[Window]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record([
        "window",
        "student_id",
        "question_id",
        "concept_id",
        "response",
    ])
    .map_err(|e| csv_err(path, e))?;
    for (i, win) in ws.iter().enumerate() {
        for it in win.items() {
            w.write_record([
                i.to_string(),
                win.student_id.clone(),
                it.question.to_string(),
                it.concept.to_string(),
                it.response.to_string(),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn load_windows(path: &Path, max_len: usize) -> Result<Vec<Window>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut groups: Vec<(String, Vec<Interaction>)> = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let fail = |msg: &str| Error::Format {
            path: path.display().to_string(),
            line,
            msg: msg.to_string(),
        };
        let idx: usize = rec[0].parse().map_err(|_| fail("bad window index"))?;
        let parse = |k: usize| rec[k].parse::<usize>().map_err(|_| fail("bad id"));
        let it = Interaction {
            question: parse(2)?,
            concept: parse(3)?,
            response: match &rec[4] {
                "0" => 0,
                "1" => 1,
                _ => return Err(fail("response must be 0 or 1")),
            },
        };
        if idx == groups.len() {
            groups.push((rec[1].to_string(), Vec::new()));
        } else if idx + 1 != groups.len() {
            return Err(fail("window indices must be consecutive"));
        }
        groups[idx].1.push(it);
    }
    Ok(groups
        .into_iter()
        .map(|(s, items)| Window::from_items(&s, &items, max_len))
        .collect())
}

// ---- synthetic data --------------------------------------------------------

/// Parameters of the mastery-learning generator.
///
/// Each student carries a mastery level per concept, starting at 0. Question
/// `q` (concept `q mod n_concepts`) has difficulty `δ_q ~ N(0, difficulty_std²)`.
/// A response is correct with probability `sigmoid(slope·(m − δ_q))`; after
/// the attempt mastery grows by `gain_correct` or `gain_incorrect`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_students: usize,
    pub n_concepts: usize,
    pub n_questions: usize,
    pub t_len: usize,
    pub seed: u64,
    pub slope: f64,
    pub difficulty_std: f64,
    pub gain_correct: f64,
    pub gain_incorrect: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_students: 500,
            n_concepts: 10,
            n_questions: 100,
            t_len: 100,
            seed: 7,
            slope: 1.5,
            difficulty_std: 1.0,
            gain_correct: 0.3,
            gain_incorrect: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub sequences: Vec<InteractionSequence>,
    /// Generating probability of a correct answer at every position.
    pub probs: Vec<Vec<f64>>,
    pub difficulty: Vec<f64>,
}

impl SynthDataset {
    /// AUC of the generating probabilities against the sampled responses.
    pub fn oracle_auc(&self) -> Option<f64> {
        let (p, l): (Vec<f64>, Vec<bool>) = self
            .sequences
            .iter()
            .zip(&self.probs)
            .flat_map(|(s, ps)| s.items.iter().zip(ps).map(|(it, &p)| (p, it.response == 1)))
            .unzip();
        metrics::auc(&p, &l)
    }

    pub fn vocab(&self, n_questions: usize, n_concepts: usize) -> Vocab {
        let mut v = Vocab::default();
        for q in 0..n_questions {
            v.questions.intern(&q.to_string());
        }
        for c in 0..n_concepts {
            v.concepts.intern(&c.to_string());
        }
        v
    }
}

pub fn synth_mastery(cfg: &SynthConfig) -> SynthDataset {
    let mut rng = Rng::new(cfg.seed);
    let mut drng = rng.split(1);
    let difficulty: Vec<f64> = (0..cfg.n_questions)
        .map(|_| drng.normal(0.0, cfg.difficulty_std))
        .collect();
    let mut srng = rng.split(2);
    let mut sequences = Vec::with_capacity(cfg.n_students);
    let mut probs = Vec::with_capacity(cfg.n_students);
    for s in 0..cfg.n_students {
        let mut mastery = vec![0.0; cfg.n_concepts];
        let mut items = Vec::with_capacity(cfg.t_len);
        let mut ps = Vec::with_capacity(cfg.t_len);
        for _ in 0..cfg.t_len {
            let q = srng.below(cfg.n_questions);
            let c = q % cfg.n_concepts;
            let p = sigmoid(cfg.slope * (mastery[c] - difficulty[q]));
            let correct = srng.uniform() < p;
            mastery[c] += if correct {
                cfg.gain_correct
            } else {
                cfg.gain_incorrect
            };
            items.push(Interaction {
                question: q,
                concept: c,
                response: correct as u8,
            });
            ps.push(p);
        }
        sequences.push(InteractionSequence {
            student_id: format!("s{s}"),
            items,
        });
        probs.push(ps);
    }
    SynthDataset {
        sequences,
        probs,
        difficulty,
    }
}

/// Randomly permutes all responses across the dataset, destroying any
/// relation between history and outcome while keeping the base rate.
pub fn permute_labels(seqs: &[InteractionSequence], seed: u64) -> Vec<InteractionSequence> {
    let mut labels: Vec<u8> = seqs
        .iter()
        .flat_map(|s| s.items.iter().map(|i| i.response))
        .collect();
    Rng::new(seed).shuffle(&mut labels);
    let mut it = labels.into_iter();
    seqs.iter()
        .map(|s| InteractionSequence {
            student_id: s.student_id.clone(),
            items: s
                .items
                .iter()
                .map(|i| Interaction {
                    response: it.next().unwrap(),
                    ..*i
                })
                .collect(),
        })
        .collect()
}
