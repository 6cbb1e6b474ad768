use std::io::Write;
use std::path::Path;

use dasconv_core::audit::audit;
use dasconv_core::data::classes::class_code;
use dasconv_core::data::io::{read_corpus, write_corpus, write_label_png, write_record};
use dasconv_core::data::synth::{configured_ranking, synth_dataset, AREA_PLAN, LATTICE};
use dasconv_core::data::{
    corpus_frequencies, normalize_nrgb, split_indices, ClassFrequencyTable, RawExample, SampleRecord, Split,
};
use dasconv_core::eval::{evaluate, predict};
use dasconv_core::gradcheck::{check_op, GradcheckConfig, OP_NAMES};
use dasconv_core::graph::FaultInjection;
use dasconv_core::model::Model;
use dasconv_core::train::{train, TrainConfig, LOG_HEADER};
use dasconv_core::{build_model, Error, ModelConfig, Result};
use rayon::prelude::*;
use serde_json::json;

use crate::output::{Outputs, RunManifest};
use crate::{AuditArgs, Command, DataArgs, EvalArgs, GradcheckArgs, PredictArgs, PreprocessArgs, SynthArgs, TrainArgs};

/// Splits are always drawn with this seed so that train, eval and
/// preprocess agree regardless of `--seed`.
pub const SPLIT_SEED: u64 = 0;
pub const FREQUENCY_FILE: &str = "class_frequency.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train_log.csv";

pub fn run(cmd: Command) -> Result<u8> {
    match cmd {
        Command::Audit(a) => cmd_audit(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Preprocess(a) => cmd_preprocess(a),
    }
}

fn manifest(command: &str, config_path: Option<&Path>, config: serde_json::Value, seed: u64, out: &Path) -> RunManifest {
    RunManifest {
        command: command.into(),
        config_path: config_path.map(Path::to_path_buf),
        config,
        seed,
        tool_version: env!("CARGO_PKG_VERSION"),
        output_dir: out.to_path_buf(),
        args: std::env::args().collect(),
    }
}

/// Runs `f` against a fresh output set; on error removes what it wrote.
fn with_outputs<T>(root: &Path, f: impl FnOnce(&mut Outputs) -> Result<T>) -> Result<T> {
    let mut o = Outputs::create(root)?;
    match f(&mut o) {
        Ok(v) => Ok(v),
        Err(e) => {
            o.rollback();
            Err(e)
        }
    }
}

fn load_model_config(path: Option<&Path>) -> Result<ModelConfig> {
    match path {
        Some(p) => ModelConfig::load(p).map_err(|e| match e {
            Error::Io(io) => Error::Config(format!("{}: {io}", p.display())),
            Error::ConfigViolations(v) => {
                Error::ConfigViolations(v.into_iter().map(|m| format!("{}: {m}", p.display())).collect())
            }
            other => other,
        }),
        None => Ok(ModelConfig::default()),
    }
}

fn cmd_audit(a: AuditArgs) -> Result<u8> {
    let mut cfg = load_model_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.batch == 0 {
        return Err(Error::Usage("--batch must be >= 1".into()));
    }
    let model = build_model(&cfg)?;
    let mut report = audit(&model, model.input_shape(a.batch))?;
    if let Some(d) = a.diff_miou {
        report = report.with_effectiveness(d)?;
    }
    let text = report.to_text();
    print!("{text}");
    if let Some(out) = &a.out {
        with_outputs(out, |o| {
            let m = manifest("audit", a.config.as_deref(), json!({ "model": cfg, "batch": a.batch }), cfg.seed, out);
            o.write_manifest(&m)?;
            o.write("audit.txt", &text)?;
            o.write("audit.json", report.to_json() + "\n")?;
            Ok(())
        })?;
    }
    if report.passed() {
        Ok(0)
    } else {
        eprintln!("audit: at least one gate failed");
        Ok(1)
    }
}

fn op_name(name: &str) -> Result<&'static str> {
    OP_NAMES
        .iter()
        .copied()
        .find(|&o| o == name)
        .ok_or_else(|| Error::Usage(format!("unknown op `{name}`; valid ops: all, {}", OP_NAMES.join(", "))))
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<u8> {
    let ops: Vec<&'static str> = if a.scope == "all" {
        OP_NAMES.to_vec()
    } else {
        vec![op_name(&a.scope)?]
    };
    let fault = a
        .inject_fault
        .as_deref()
        .map(|n| op_name(n).map(|op| FaultInjection { op, factor: 1.01 }))
        .transpose()?;
    if a.cases == 0 {
        return Err(Error::Usage("--cases must be >= 1".into()));
    }
    let cfg = GradcheckConfig {
        cases: a.cases,
        seed: a.seed,
        fault,
        ..GradcheckConfig::default()
    };
    let reports = ops.iter().map(|op| check_op(op, &cfg)).collect::<Result<Vec<_>>>()?;
    let mut text = format!("{:<18} {:>5} {:>14}  {}\n", "op", "cases", "max rel err", "status");
    for r in &reports {
        text.push_str(&format!(
            "{:<18} {:>5} {:>14.3e}  {}\n",
            r.op,
            r.cases,
            r.max_rel_error,
            if r.passed { "PASS" } else { "FAIL" }
        ));
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.op.as_str()).collect();
    print!("{text}");
    if let Some(out) = &a.out {
        with_outputs(out, |o| {
            let snapshot = json!({
                "scope": a.scope,
                "cases": cfg.cases,
                "step": cfg.step,
                "tolerance": cfg.tolerance,
                "inject_fault": a.inject_fault,
            });
            o.write_manifest(&manifest("gradcheck", None, snapshot, a.seed, out))?;
            o.write("gradcheck.txt", &text)?;
            o.write("gradcheck.json", serde_json::to_string_pretty(&reports)? + "\n")?;
            Ok(())
        })?;
    }
    if failed.is_empty() {
        Ok(0)
    } else {
        eprintln!("gradcheck failed: {}", failed.join(", "));
        Ok(1)
    }
}

struct Corpus {
    raw: Vec<RawExample>,
    split: Split,
    freq: ClassFrequencyTable,
}

/// Reads a corpus and its split. Overlaps are flattened with
/// `<data>/class_frequency.json` when present, else with counts over the
/// training part.
fn load_corpus(d: &DataArgs) -> Result<Corpus> {
    let raw = read_corpus(&d.data)?;
    let split = split_indices(raw.len(), d.split, SPLIT_SEED);
    let stored = d.data.join(FREQUENCY_FILE);
    let freq = if stored.exists() {
        ClassFrequencyTable::load(&stored)?
    } else {
        let train: Vec<RawExample> = split.train.iter().map(|&i| raw[i].clone()).collect();
        corpus_frequencies(&train)?
    };
    Ok(Corpus { raw, split, freq })
}

fn check_size(ex: &RawExample, cfg: &ModelConfig) -> Result<()> {
    if (ex.height, ex.width) != cfg.input_hw {
        return Err(Error::Config(format!(
            "image {} is {}x{} but the model's input_hw is {}x{}",
            ex.id, ex.height, ex.width, cfg.input_hw.0, cfg.input_hw.1
        )));
    }
    Ok(())
}

fn samples(c: &Corpus, idx: &[usize], cfg: &ModelConfig) -> Result<Vec<SampleRecord>> {
    idx.par_iter()
        .map(|&i| {
            check_size(&c.raw[i], cfg)?;
            c.raw[i].to_sample(&c.freq)
        })
        .collect()
}

fn ids(c: &Corpus, idx: &[usize]) -> Vec<String> {
    idx.iter().map(|&i| c.raw[i].id.clone()).collect()
}

fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut t = match &a.train_config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.epochs {
        t.max_epochs = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lr_max {
        t.lr_max = v;
    }
    if let Some(v) = a.lr_min {
        t.lr_min = v;
    }
    if let Some(v) = a.patience {
        t.patience = v;
    }
    if a.no_augment {
        t.augment = false;
    }
    t.validate()?;
    Ok(t)
}

fn cmd_train(a: TrainArgs) -> Result<u8> {
    let tc = resolve_train_config(&a)?;
    let mut model = match &a.checkpoint {
        Some(p) => Model::load(p)?,
        None => {
            let mut cfg = load_model_config(a.config.as_deref())?;
            if let Some(w) = a.width {
                cfg = cfg.with_width(w);
            }
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            build_model(&cfg)?
        }
    };
    let corpus = load_corpus(&a.data)?;
    let train_set = samples(&corpus, &corpus.split.train, &model.cfg)?;
    let val_set = samples(&corpus, &corpus.split.val, &model.cfg)?;
    with_outputs(&a.out, |o| {
        let snapshot = json!({
            "model": model.cfg,
            "train": tc,
            "data": a.data.data,
            "split": a.data.split.to_string(),
            "train_ids": ids(&corpus, &corpus.split.train),
            "val_ids": ids(&corpus, &corpus.split.val),
            "class_frequency": corpus.freq,
            "initial_checkpoint": a.checkpoint,
        });
        o.write_manifest(&manifest("train", a.config.as_deref(), snapshot, tc.seed, &a.out))?;
        o.write(FREQUENCY_FILE, corpus.freq.to_json() + "\n")?;
        let mut log = std::io::BufWriter::new(std::fs::File::create(o.file(LOG_FILE))?);
        writeln!(log, "{LOG_HEADER}")?;
        let mut io_err = None;
        let started = std::time::Instant::now();
        let outcome = train(&mut model, &train_set, &val_set, &tc, |e| {
            println!(
                "epoch {:>4}/{}  lr {:.4e}  train_loss {:.5}  val_miou {:.4}  ({:.0}s)",
                e.epoch,
                tc.max_epochs,
                e.lr,
                e.train_loss,
                e.val_miou,
                started.elapsed().as_secs_f64()
            );
            if let Err(err) = log.write_all(e.csv_row().as_bytes()).and_then(|_| log.flush()) {
                io_err.get_or_insert(err);
            }
        })?;
        if let Some(e) = io_err {
            return Err(e.into());
        }
        model.save(o.file(CHECKPOINT_FILE))?;
        let summary = json!({
            "epochs_run": outcome.log.len(),
            "best_epoch": outcome.best_epoch,
            "best_val_miou": outcome.best_val_miou,
            "stopped_early": outcome.stopped_early,
        });
        o.write("train_summary.json", serde_json::to_string_pretty(&summary)? + "\n")?;
        println!(
            "best val mIoU {:.4} at epoch {}; checkpoint {}",
            outcome.best_val_miou,
            outcome.best_epoch,
            a.out.join(CHECKPOINT_FILE).display()
        );
        Ok(0)
    })
}

fn cmd_eval(a: EvalArgs) -> Result<u8> {
    let model = Model::load(&a.checkpoint)?;
    let corpus = load_corpus(&a.data)?;
    let idx = corpus.split.part(&a.subset)?.to_vec();
    if idx.is_empty() {
        return Err(Error::Config(format!("split part `{}` is empty", a.subset)));
    }
    let set = samples(&corpus, &idx, &model.cfg)?;
    let report = evaluate(&model, &set)?;
    let text = report.to_text();
    print!("{text}");
    with_outputs(&a.out, |o| {
        let snapshot = json!({
            "model": model.cfg,
            "checkpoint": a.checkpoint,
            "data": a.data.data,
            "split": a.data.split.to_string(),
            "subset": a.subset,
            "ids": ids(&corpus, &idx),
            "class_frequency": corpus.freq,
        });
        o.write_manifest(&manifest("eval", None, snapshot, a.seed, &a.out))?;
        o.write("eval.txt", &text)?;
        o.write("eval.json", report.to_json() + "\n")?;
        Ok(0)
    })
}

fn cmd_predict(a: PredictArgs) -> Result<u8> {
    let model = Model::load(&a.checkpoint)?;
    let raw = read_corpus(&a.data)?;
    for ex in &raw {
        check_size(ex, &model.cfg)?;
    }
    with_outputs(&a.out, |o| {
        let snapshot = json!({
            "model": model.cfg,
            "checkpoint": a.checkpoint,
            "data": a.data,
            "ids": raw.iter().map(|e| &e.id).collect::<Vec<_>>(),
        });
        o.write_manifest(&manifest("predict", None, snapshot, a.seed, &a.out))?;
        let dir = o.dir("predictions")?;
        for ex in &raw {
            let image = normalize_nrgb(&ex.rgb, &ex.nir, ex.height, ex.width)?;
            let sample = SampleRecord {
                image,
                label: Vec::new(),
                valid: Vec::new(),
            };
            let pred = predict(&model, &sample)?;
            write_label_png(&dir.join(format!("{}.png", ex.id)), &pred.data, ex.height, ex.width)?;
            println!("{}", ex.id);
        }
        Ok(0)
    })
}

fn cmd_synth(a: SynthArgs) -> Result<u8> {
    if a.n == 0 {
        return Err(Error::Usage("--n must be >= 1".into()));
    }
    if a.size < LATTICE {
        return Err(Error::Usage(format!("--size must be >= {LATTICE}")));
    }
    with_outputs(&a.out, |o| {
        let snapshot = json!({ "n": a.n, "size": a.size });
        o.write_manifest(&manifest("synth", None, snapshot, a.seed, &a.out))?;
        for d in ["images", "labels", "masks"] {
            o.dir(d)?;
        }
        let raw: Vec<RawExample> = synth_dataset(a.n, a.seed, a.size).into_iter().map(|e| e.raw).collect();
        write_corpus(o.root(), &raw)?;
        let info = json!({
            "n": a.n,
            "seed": a.seed,
            "size": a.size,
            "ranking": configured_ranking().into_iter().map(class_code).collect::<Vec<_>>(),
            "area_fractions": AREA_PLAN.iter().map(|&(c, f)| (class_code(c), f)).collect::<Vec<_>>(),
        });
        o.write("synth.json", serde_json::to_string_pretty(&info)? + "\n")?;
        println!("wrote {} images of {}x{} to {}", a.n, a.size, a.size, a.out.display());
        Ok(0)
    })
}

fn cmd_preprocess(a: PreprocessArgs) -> Result<u8> {
    let raw = read_corpus(&a.data.data)?;
    let split = split_indices(raw.len(), a.data.split, SPLIT_SEED);
    let train: Vec<RawExample> = split.train.iter().map(|&i| raw[i].clone()).collect();
    let freq = corpus_frequencies(&train)?;
    with_outputs(&a.out, |o| {
        let names = |idx: &[usize]| idx.iter().map(|&i| raw[i].id.clone()).collect::<Vec<_>>();
        let split_json = json!({
            "spec": a.data.split.to_string(),
            "train": names(&split.train),
            "val": names(&split.val),
            "test": names(&split.test),
        });
        let snapshot = json!({ "data": a.data.data, "split": split_json });
        o.write_manifest(&manifest("preprocess", None, snapshot, a.seed, &a.out))?;
        o.write(FREQUENCY_FILE, freq.to_json() + "\n")?;
        o.write("split.json", serde_json::to_string_pretty(&split_json)? + "\n")?;
        let records = o.dir("records")?;
        let labels = o.dir("labels")?;
        raw.par_iter().try_for_each(|ex| -> Result<()> {
            write_record(&records.join(format!("{}.dast", ex.id)), ex, &freq)?;
            write_label_png(&labels.join(format!("{}.png", ex.id)), &ex.label(&freq)?, ex.height, ex.width)
        })?;
        let ranking: Vec<String> = freq
            .ranking()
            .into_iter()
            .map(|c| format!("{}={}", class_code(c), freq.count(c)))
            .collect();
        println!("{} records; class ranking {}", raw.len(), ranking.join(" > "));
        Ok(0)
    })
}

