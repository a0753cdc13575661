use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ssmkt::autodiff::Tape;
use ssmkt::bench::{self, BenchConfig};
use ssmkt::config::{parse_key_values, write_key_values};
use ssmkt::data::{self, PreparedData, SynthConfig, Vocab, Window};
use ssmkt::interpret::{self, exercise_weights, materialize_alpha, normalize_row};
use ssmkt::metrics::fmt_metric;
use ssmkt::model::{Arch, KtModel, ModelConfig, ModelTrace};
use ssmkt::train::{self, TrainConfig, Trainer};
use ssmkt::{checkpoint, Error, ParamStore, Result, Rng};

use crate::{BenchArgs, EvalArgs, ExplainArgs, PrepareArgs, SynthArgs, TrainArgs};

pub const SEED_ENV: &str = "SSMKT_SEED";
const RUN_CONFIG: &str = "config.txt";
const RUN_VOCAB: &str = "vocab.csv";

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| {
            Error::Config(format!("{SEED_ENV} must be an unsigned integer, got {v:?}"))
        }),
        Err(_) => Ok(None),
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn prepare(a: PrepareArgs) -> Result<()> {
    if a.max_len == 0 {
        return Err(Error::Config("--max-len must be positive".into()));
    }
    let seed = a.seed.or(env_seed()?).unwrap_or(0);
    let (seqs, vocab) = data::load_interactions(&a.input)?;
    let prep = PreparedData::build(&seqs, vocab, a.max_len, seed)?;
    prep.save(&a.out)?;
    println!(
        "{} students, {} questions, {} concepts; windows train/val/test = {}/{}/{} -> {}",
        seqs.len(),
        prep.meta.n_questions,
        prep.meta.n_concepts,
        prep.splits.train.len(),
        prep.splits.val.len(),
        prep.splits.test.len(),
        a.out.display()
    );
    Ok(())
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        n_students: a.students,
        n_concepts: a.concepts,
        n_questions: a.questions,
        t_len: a.t_len,
        seed: a
            .seed
            .or(env_seed()?)
            .unwrap_or(SynthConfig::default().seed),
        ..Default::default()
    };
    if cfg.n_concepts == 0 || cfg.n_questions == 0 {
        return Err(Error::Config(
            "--concepts and --questions must be positive".into(),
        ));
    }
    let syn = data::synth_mastery(&cfg);
    let seqs = if a.permute_labels {
        data::permute_labels(&syn.sequences, cfg.seed)
    } else {
        syn.sequences.clone()
    };
    data::write_interactions_csv(&a.out, &seqs, None)?;
    println!(
        "{} students x {} steps -> {} (generator AUC {})",
        cfg.n_students,
        cfg.t_len,
        a.out.display(),
        fmt_metric(syn.oracle_auc())
    );
    Ok(())
}

/// Model and trainer settings for a run: defaults, then the config file,
/// then flags.
pub fn resolve_train_config(
    a: &TrainArgs,
    prep: &PreparedData,
) -> Result<(ModelConfig, TrainConfig)> {
    let mut model = ModelConfig {
        max_seq_len: prep.meta.max_len,
        ..ModelConfig::new(prep.meta.n_questions, prep.meta.n_concepts)
    };
    let mut tc = TrainConfig::default();
    let mut file_seed = None;
    if let Some(path) = &a.config {
        let kv = parse_key_values(&read(path)?, &path.display().to_string())?;
        model.apply(&kv)?;
        apply_train_keys(&mut tc, &kv)?;
        file_seed = kv.contains_key("seed").then_some(tc.seed);
    }
    // the vocabulary always comes from the data
    model.n_questions = prep.meta.n_questions;
    model.n_concepts = prep.meta.n_concepts;
    if let Some(v) = &a.arch {
        model.arch = v.parse()?;
    }
    if let Some(v) = a.d_model {
        model.d_model = v;
    }
    if let Some(v) = a.layers {
        model.n_layers = v;
    }
    if let Some(v) = a.n_state {
        model.n_state = v;
    }
    if let Some(v) = a.expand {
        model.expand = v;
    }
    if let Some(v) = a.conv_kernel {
        model.conv_kernel = v;
    }
    if let Some(v) = a.lambda {
        model.lambda = v;
    }
    if let Some(v) = a.dropout {
        model.dropout = v;
    }
    if a.no_ffn {
        model.use_ffn = false;
    }
    if a.no_rasch {
        model.use_rasch = false;
    }
    if let Some(v) = &a.ffn_placement {
        model.ffn_placement = v.parse()?;
    }
    if a.head_concat_question {
        model.head_concat_question = true;
    }
    if let Some(v) = &a.scan {
        model.scan_mode = v.parse().map_err(Error::Config)?;
    }
    if a.use_skip {
        model.use_skip = true;
    }
    if a.freeze_a {
        model.freeze_a = true;
    }
    if let Some(v) = a.lr {
        tc.lr = v;
    }
    if let Some(v) = a.batch {
        tc.batch_size = v;
    }
    if let Some(v) = a.epochs {
        tc.max_epochs = v;
    }
    if let Some(v) = a.patience {
        tc.patience = v;
    }
    if let Some(v) = a.clip {
        tc.clip_norm = v;
    }
    tc.seed = a.seed.or(file_seed).or(env_seed()?).unwrap_or(0);
    let lr_ok = tc.lr.is_finite() && tc.lr >= 0.0;
    let clip_ok = tc.clip_norm > 0.0;
    if !lr_ok || !clip_ok || tc.batch_size == 0 || tc.max_epochs == 0 {
        return Err(Error::Config(
            "lr must be >= 0, batch, epochs and clip must be positive".into(),
        ));
    }
    model.validate()?;
    Ok((model, tc))
}

fn apply_train_keys(tc: &mut TrainConfig, kv: &BTreeMap<String, String>) -> Result<()> {
    fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
        v.parse()
            .map_err(|_| Error::Config(format!("bad value for {k}: {v:?}")))
    }
    for (k, v) in kv {
        match k.as_str() {
            "lr" => tc.lr = num(k, v)?,
            "batch_size" => tc.batch_size = num(k, v)?,
            "epochs" => tc.max_epochs = num(k, v)?,
            "patience" => tc.patience = num(k, v)?,
            "clip_norm" => tc.clip_norm = num(k, v)?,
            "seed" => tc.seed = num(k, v)?,
            _ => {}
        }
    }
    Ok(())
}

fn train_key_values(tc: &TrainConfig) -> String {
    write_key_values([
        ("lr", format!("{:e}", tc.lr)),
        ("batch_size", tc.batch_size.to_string()),
        ("epochs", tc.max_epochs.to_string()),
        ("patience", tc.patience.to_string()),
        ("clip_norm", tc.clip_norm.to_string()),
        ("seed", tc.seed.to_string()),
    ])
}

pub fn train(a: TrainArgs) -> Result<()> {
    let prep = PreparedData::load(&a.data)?;
    let (mcfg, tc) = resolve_train_config(&a, &prep)?;
    mkdir(&a.out)?;
    write(
        &a.out.join(RUN_CONFIG),
        &format!("{}{}", mcfg.to_key_values(), train_key_values(&tc)),
    )?;
    prep.vocab.save(&a.out.join(RUN_VOCAB))?;
    let mut store = ParamStore::<f64>::new();
    let model = KtModel::new(mcfg, &mut store, &mut Rng::new(tc.seed))?;
    println!(
        "{} parameters; training on {} windows, validating on {}",
        store.num_scalars(),
        prep.splits.train.len(),
        prep.splits.val.len()
    );
    let report = Trainer::new(&model, tc).with_output(&a.out).fit(
        &mut store,
        &prep.splits.train,
        &prep.splits.val,
    )?;
    for r in &report.history {
        println!("{}  ({:.1}s)", r.metrics_line(), r.wall_seconds);
    }
    let summary = write_key_values([
        ("best_epoch", report.best_epoch.to_string()),
        ("val_auc", fmt_metric(report.best_val.auc)),
        ("val_acc", fmt_metric(report.best_val.acc)),
        ("epochs_run", report.history.len().to_string()),
        ("stopped_early", report.stopped_early.to_string()),
    ]);
    write(&a.out.join("summary.txt"), &summary)?;
    println!(
        "best epoch {}: val AUC {} ACC {}{}",
        report.best_epoch,
        fmt_metric(report.best_val.auc),
        fmt_metric(report.best_val.acc),
        if report.stopped_early {
            " (early stop)"
        } else {
            ""
        }
    );
    Ok(())
}

/// Rebuilds the model of a run directory with its best parameters.
pub fn load_run(run: &Path) -> Result<(KtModel, ParamStore<f64>)> {
    let path = run.join(RUN_CONFIG);
    let kv = parse_key_values(&read(&path)?, &path.display().to_string())?;
    let mut cfg = ModelConfig::new(0, 0);
    cfg.apply(&kv)?;
    let mut store = ParamStore::new();
    let model = KtModel::new(cfg, &mut store, &mut Rng::new(0))?;
    checkpoint::restore(&run.join(train::BEST_CHECKPOINT), &mut store)?;
    Ok((model, store))
}

fn check_compatible(model: &KtModel, prep: &PreparedData) -> Result<()> {
    let c = &model.config;
    if c.n_questions != prep.meta.n_questions || c.n_concepts != prep.meta.n_concepts {
        return Err(Error::Config(format!(
            "run was trained on {} questions / {} concepts, data has {} / {}",
            c.n_questions, c.n_concepts, prep.meta.n_questions, prep.meta.n_concepts
        )));
    }
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let (model, store) = load_run(&a.run)?;
    let prep = PreparedData::load(&a.data)?;
    check_compatible(&model, &prep)?;
    let windows = prep.split(&a.split)?;
    let scores = train::evaluate(&model, &store, windows)?;
    let out = write_key_values([
        ("split", a.split.clone()),
        ("auc", fmt_metric(scores.auc)),
        ("acc", fmt_metric(scores.acc)),
        ("positions", scores.count.to_string()),
    ]);
    write(&a.run.join(format!("eval_{}.txt", a.split)), &out)?;
    match scores.auc {
        Some(_) => println!(
            "{}: AUC {} ACC {} over {} positions",
            a.split,
            fmt_metric(scores.auc),
            fmt_metric(scores.acc),
            scores.count
        ),
        None => println!(
            "{}: AUC undefined (split has a single response class) ACC {} over {} positions",
            a.split,
            fmt_metric(scores.acc),
            scores.count
        ),
    }
    Ok(())
}

fn find_window<'w>(windows: &'w [Window], student: &str) -> Result<&'w Window> {
    if let Some(w) = windows.iter().find(|w| w.student_id == student) {
        return Ok(w);
    }
    student
        .parse::<usize>()
        .ok()
        .and_then(|i| windows.get(i))
        .ok_or_else(|| {
            Error::Config(format!(
                "no student {student:?} in this split ({} windows)",
                windows.len()
            ))
        })
}

/// `concept(response)` for every position.
fn labels(vocab: &Vocab, w: &Window) -> Vec<String> {
    w.items()
        .iter()
        .map(|it| {
            format!(
                "{}({})",
                vocab.concepts.raw(it.concept).unwrap_or("?"),
                it.response
            )
        })
        .collect()
}

pub fn explain(a: ExplainArgs) -> Result<()> {
    let (model, store) = load_run(&a.run)?;
    if model.config.arch != Arch::Mamba {
        return Err(Error::Config("explain needs a mamba run".into()));
    }
    let prep = PreparedData::load(&a.data)?;
    check_compatible(&model, &prep)?;
    let vocab = Vocab::load(&a.run.join(RUN_VOCAB)).unwrap_or_else(|_| prep.vocab.clone());
    let win = find_window(prep.split(&a.split)?, &a.student)?;
    let items = win.items();
    let n_layers = model.layers.len();
    let layer = a.layer.unwrap_or(n_layers - 1);
    if layer >= n_layers {
        return Err(Error::Config(format!("--layer must be below {n_layers}")));
    }
    let mut trace = ModelTrace::new();
    let mut tape = Tape::<f64>::no_grad();
    model.forward_traced(&store, &mut tape, &items, Some(&mut trace))?;
    let tr = trace[layer].as_ref().expect("mamba layers are traced");
    let alpha = materialize_alpha(tr, a.force)?;
    let t_len = alpha.t_len;
    let labels = labels(&vocab, win);
    let dir = a.run.join("explain");
    mkdir(&dir)?;
    let who = format!("student {} (layer {layer})", win.student_id);

    match a.level.as_str() {
        "sequence" => {
            let channels = a
                .channels
                .clone()
                .unwrap_or_else(|| default_channels(alpha.channels));
            if let Some(&bad) = channels.iter().find(|&&m| m >= alpha.channels) {
                return Err(Error::Config(format!(
                    "channel {bad} out of range (layer has {})",
                    alpha.channels
                )));
            }
            for m in channels {
                let rows: Vec<Option<Vec<f64>>> = (0..t_len)
                    .map(|i| normalize_row(&alpha.row(m, i)[..i]))
                    .collect();
                let stem = dir.join(format!("sequence_layer{layer}_ch{m}"));
                write(
                    &stem.with_extension("csv"),
                    &interpret::grid_csv(&rows, t_len),
                )?;
                let svg = interpret::heatmap_svg(&format!("{who}, channel {m}"), &rows, &labels);
                write(&stem.with_extension("svg"), &svg)?;
                let undefined = rows.iter().skip(1).filter(|r| r.is_none()).count();
                println!(
                    "channel {m}: {} (.csv, .svg); {undefined} undefined rows besides row 0",
                    stem.display()
                );
            }
            println!("note: row i=0 has no earlier exercises and is left empty");
        }
        "exercise" => {
            if t_len < 2 {
                return Err(Error::Config(
                    "sequence too short for exercise-level weights".into(),
                ));
            }
            let target = a.target.unwrap_or(t_len - 1);
            let w = exercise_weights(&alpha, target).map_err(|e| Error::Config(e.to_string()))?;
            let stem = dir.join(format!("exercise_layer{layer}_t{target}"));
            let mut csv = String::from("j,label,beta,gamma\n");
            for (j, ((label, &b), &g)) in labels.iter().zip(&w.beta).zip(&w.gamma).enumerate() {
                csv.push_str(&format!(
                    "{j},{label},{},{}\n",
                    interpret::fmt_sig6(b),
                    interpret::fmt_sig6(g)
                ));
            }
            write(&stem.with_extension("csv"), &csv)?;
            write(
                &dir.join(format!(
                    "exercise_layer{layer}_t{target}_top{}.csv",
                    a.top_k
                )),
                &interpret::top_k_csv(&w, a.top_k, &labels),
            )?;
            let svg = interpret::heatmap_svg(
                &format!("{who}, influence on step {target} [{}]", labels[target]),
                &[Some(w.gamma.clone())],
                &labels,
            );
            write(&stem.with_extension("svg"), &svg)?;
            println!(
                "target {target} [{}]: top {} earlier exercises",
                labels[target], a.top_k
            );
            for (rank, (j, g)) in w.top_k(a.top_k).into_iter().enumerate() {
                println!(
                    "{:>3}. j={j:<4} {:<12} {}",
                    rank + 1,
                    labels[j],
                    interpret::fmt_sig6(g)
                );
            }
            println!("-> {}", stem.display());
        }
        other => {
            return Err(Error::Config(format!(
                "--level must be sequence or exercise, got {other:?}"
            )))
        }
    }
    Ok(())
}

/// The three channels inspected in the reference figures when they exist.
fn default_channels(m: usize) -> Vec<usize> {
    let picks: Vec<usize> = [14, 145, 241].into_iter().filter(|&c| c < m).collect();
    if picks.is_empty() {
        vec![0]
    } else {
        picks
    }
}

pub fn bench(a: BenchArgs) -> Result<()> {
    let models = a
        .models
        .iter()
        .map(|m| m.parse::<Arch>())
        .collect::<Result<Vec<_>>>()?;
    if a.seqlens.contains(&0) || a.d_model == 0 || a.layers == 0 {
        return Err(Error::Config(
            "sequence lengths, --d-model and --layers must be positive".into(),
        ));
    }
    let cfg = BenchConfig {
        models,
        seqlens: a.seqlens.clone(),
        d_model: a.d_model,
        n_layers: a.layers,
        repeats: a.repeats.max(1),
        seed: a.seed.or(env_seed()?).unwrap_or(0),
        ..Default::default()
    };
    let records = bench::run::<f64>(&cfg, true)?;
    let table = bench::to_table(&records);
    print!("{table}");
    if let Some(dir) = &a.out {
        mkdir(dir)?;
        write(&dir.join("bench.csv"), &bench::to_csv(&records))?;
        write(&dir.join("bench.txt"), &table)?;
        println!("-> {}", PathBuf::from(dir).join("bench.csv").display());
    }
    Ok(())
}
