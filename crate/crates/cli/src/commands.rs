use std::fs;
use std::path::{Path, PathBuf};

use are_core::analysis::{count_params, known_dataset, render_saliency, saliency, KNOWN_DATASETS};
use are_core::model::{Checkpoint, Method, Model, ModelSpec};
use are_core::text::{
    build_vocab_from_raw, encode_corpus, load_csv, tokenize, EncodedDocument, RawDocument, Vocabulary,
};
use are_core::trainer::{
    evaluate, read_metric_log, split_validation, write_metric_log, Trainer, STATE_CHECKPOINT,
};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::failure::Failure;

pub const CONFIG_SNAPSHOT: &str = "config.txt";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const METRIC_LOG: &str = "metrics.ndjson";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";
pub const SUMMARY_FILE: &str = "summary.json";

type Outcome = Result<String, Failure>;

fn required<'a, T>(value: &'a Option<T>, key: &str, command: &str) -> Result<&'a T, Failure> {
    value
        .as_ref()
        .ok_or_else(|| Failure::input(format!("{command} needs `{key}` (config key or --{key})")))
}

fn write(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("JSON values always serialize");
    s.push('\n');
    s
}

fn max_class(docs: &[RawDocument]) -> usize {
    docs.iter().map(|d| d.label + 1).max().unwrap_or(0)
}

pub fn train(cfg: &RunConfig, resume: bool) -> Outcome {
    let train_path = required(&cfg.train, "train", "train")?;
    let out = required(&cfg.out, "out", "train")?;
    let raw = load_csv(train_path)?;
    let raw_test = cfg.test.as_ref().map(load_csv).transpose()?;

    let vocab = build_vocab_from_raw(&raw, cfg.min_count, cfg.max_len)?;
    let c = cfg.radius();
    let (docs, skipped) = encode_corpus(&raw, &vocab, c, cfg.max_len);
    let test_docs = raw_test.as_ref().map(|t| encode_corpus(t, &vocab, c, cfg.max_len).0);
    let seen = max_class(&raw).max(raw_test.as_deref().map_or(0, max_class)).max(2);
    let n = cfg.n.unwrap_or(seen);
    if let Some(v) = cfg.v {
        if v != vocab.len() {
            return Err(Failure::input(format!(
                "config sets v = {v} but the training data yields a vocabulary of {}",
                vocab.len()
            )));
        }
    }
    let spec = cfg.model_spec(vocab.len(), n);
    spec.validate()?;

    fs::create_dir_all(out).map_err(|e| Failure::input(format!("{}: {e}", out.display())))?;
    let mut resolved = cfg.clone();
    resolved.set("v", &vocab.len().to_string())?;
    resolved.set("n", &n.to_string())?;
    write(&out.join(CONFIG_SNAPSHOT), &resolved.to_text())?;
    write(&out.join(VOCAB_FILE), &vocab.to_text())?;

    let mut runs = Vec::new();
    let mut test_sum = 0.0;
    for run in 0..cfg.runs {
        let seed = cfg.seed + run as u64;
        let dir = if cfg.runs == 1 { out.clone() } else { out.join(format!("run-{run}")) };
        fs::create_dir_all(&dir).map_err(|e| Failure::input(format!("{}: {e}", dir.display())))?;
        let (tr, va) = split_validation(docs.clone(), cfg.val_fraction, seed);
        let config = cfg.train_config(seed, Some(dir.clone()));
        let state = dir.join(STATE_CHECKPOINT);
        let resuming = resume && state.exists();
        let mut trainer = if resuming {
            let t = Trainer::from_checkpoint(&Checkpoint::load(&state)?, config)?;
            if t.model().spec() != &spec {
                return Err(Failure::compat(format!(
                    "{} holds {:?}, configuration asks for {spec:?}",
                    state.display(),
                    t.model().spec()
                )));
            }
            t
        } else {
            Trainer::new(Model::seeded(spec, seed)?, config)?
        };
        trainer.run(&tr, &va, cfg.max_steps)?;

        let log_path = dir.join(METRIC_LOG);
        let mut log = if resuming && log_path.exists() { read_metric_log(&log_path)? } else { Vec::new() };
        log.extend_from_slice(trainer.log());
        write_metric_log(&log_path, &log)?;
        trainer.model().save(dir.join(FINAL_CHECKPOINT))?;

        let test = match &test_docs {
            Some(t) => {
                let e = evaluate(trainer.model(), t)?;
                test_sum += e.accuracy;
                json!({ "accuracy": e.accuracy, "loss": e.loss, "documents": e.documents })
            }
            None => Value::Null,
        };
        runs.push(json!({
            "seed": seed,
            "dir": dir.display().to_string(),
            "steps": trainer.step(),
            "epochs_done": trainer.epoch(),
            "finished": trainer.is_done(),
            "last_train_loss": log.last().map(|r| r.train_loss),
            "best_val_acc": trainer.best_val_acc(),
            "test": test,
        }));
    }

    let summary = json!({
        "spec": spec,
        "params": count_params(&spec).total,
        "train_documents": docs.len(),
        "skipped_empty": skipped,
        "vocab": vocab.len(),
        "runs": runs,
        "mean_test_accuracy": test_docs.as_ref().map(|_| test_sum / cfg.runs as f64),
    });
    let text = pretty(&summary);
    write(&out.join(SUMMARY_FILE), &text)?;
    Ok(text)
}

/// Loads the checkpoint and its vocabulary, refusing any explicitly
/// configured architecture value the checkpoint does not share.
fn load_trained(cfg: &RunConfig, command: &str) -> Result<(Model, Vocabulary), Failure> {
    let path = required(&cfg.checkpoint, "checkpoint", command)?;
    if !path.exists() {
        return Err(Failure::input(format!("{}: checkpoint not found", path.display())));
    }
    let model = Model::load(path)?;
    let spec = *model.spec();
    let checks: [(&str, String, String); 7] = [
        ("method", cfg.method.to_string(), spec.method.to_string()),
        ("meta", cfg.meta.to_string(), spec.meta.to_string()),
        ("h", cfg.h.to_string(), spec.h.to_string()),
        ("region", cfg.region.to_string(), spec.region().to_string()),
        ("u", cfg.u.to_string(), spec.u.to_string()),
        ("v", cfg.v.unwrap_or(spec.v).to_string(), spec.v.to_string()),
        ("n", cfg.n.unwrap_or(spec.n).to_string(), spec.n.to_string()),
    ];
    for (key, wanted, found) in checks {
        if cfg.is_explicit(key) && wanted != found {
            return Err(Failure::compat(format!(
                "{}: checkpoint has {key} = {found}, configuration asks for {wanted}",
                path.display()
            )));
        }
    }
    let vocab_path = cfg
        .vocab
        .clone()
        .unwrap_or_else(|| path.parent().unwrap_or(Path::new(".")).join(VOCAB_FILE));
    let text = fs::read_to_string(&vocab_path).map_err(|e| Failure::input(format!("{}: {e}", vocab_path.display())))?;
    let vocab = Vocabulary::from_text(&text);
    if vocab.len() != spec.v {
        return Err(Failure::compat(format!(
            "{} has {} entries but the checkpoint expects {}",
            vocab_path.display(),
            vocab.len(),
            spec.v
        )));
    }
    Ok((model, vocab))
}

pub fn eval(cfg: &RunConfig) -> Outcome {
    let (model, vocab) = load_trained(cfg, "eval")?;
    let data = required(&cfg.test, "test", "eval")?;
    let raw = load_csv(data)?;
    let (docs, skipped) = encode_corpus(&raw, &vocab, model.spec().c, cfg.max_len);
    let e = evaluate(&model, &docs)?;
    Ok(pretty(&json!({
        "documents": e.documents,
        "skipped_empty": skipped,
        "accuracy": e.accuracy,
        "loss": e.loss,
        "confusion": e.confusion,
    })))
}

fn thousands(x: usize) -> String {
    let digits = x.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

pub fn count(cfg: &RunConfig, as_json: bool) -> Outcome {
    let dataset = match &cfg.dataset {
        Some(name) => Some(known_dataset(name).ok_or_else(|| {
            let names: Vec<&str> = KNOWN_DATASETS.iter().map(|d| d.name).collect();
            Failure::input(format!("unknown dataset `{name}`; known: {}", names.join(", ")))
        })?),
        None => None,
    };
    let v = cfg.v.or(dataset.map(|d| d.vocab));
    let n = cfg.n.or(dataset.map(|d| d.classes));
    let (Some(v), Some(n)) = (v, n) else {
        return Err(Failure::input("count-params needs --v and --n, or --dataset"));
    };
    let spec: ModelSpec = cfg.model_spec(v, n);
    spec.validate()?;
    let b = count_params(&spec);
    let reference = dataset.map(|d| (d.name, d.reference_total(&spec)));

    if as_json {
        let reference = reference.map(|(name, total)| {
            json!({ "dataset": name, "total": total, "matches": total.map(|t| t == b.total) })
        });
        return Ok(pretty(&json!({ "spec": spec, "breakdown": b, "reference": reference })));
    }

    let mut out = String::new();
    let row = |out: &mut String, label: &str, value: usize, note: &str| {
        let line = format!("{label:<14}{:>14}  {note}", thousands(value));
        out.push_str(line.trim_end());
        out.push('\n');
    };
    out.push_str(&format!(
        "{} h={} region={} v={} n={}{}\n",
        spec.method,
        spec.h,
        spec.region(),
        v,
        n,
        if spec.method == Method::Are { format!(" meta={}", spec.meta) } else { String::new() }
    ));
    row(&mut out, "embedding", b.embedding, "");
    let unit_note = match spec.method {
        Method::Are => "meta-network weights and biases (conv bias included)",
        Method::Lre => "per-word look-up tensor",
        Method::Conv => "shared filters",
    };
    row(&mut out, "context unit", b.context_unit, unit_note);
    if b.batch_norm > 0 {
        row(&mut out, "batch norm", b.batch_norm, "scale and shift");
        row(&mut out, "unit + norm", b.context_unit_total(), "");
    }
    row(&mut out, "classifier", b.fc, "");
    row(&mut out, "total", b.total, "");
    match reference {
        Some((name, Some(total))) => {
            let verdict = if total == b.total { "MATCH" } else { "MISMATCH" };
            row(&mut out, "reference", total, &format!("{verdict} ({name})"));
        }
        Some((name, None)) => out.push_str(&format!(
            "reference     no published total for this configuration on {name} \
             (ARE uses h=256 region=9, LRE uses h=128 region=7)\n"
        )),
        None => {}
    }
    Ok(out)
}

pub fn saliency_report(cfg: &RunConfig, text: Option<&str>, input: Option<&PathBuf>, label: usize) -> Outcome {
    let (model, vocab) = load_trained(cfg, "saliency")?;
    let text = match (text, input) {
        (Some(t), _) => t.to_string(),
        (None, Some(p)) => fs::read_to_string(p).map_err(|e| Failure::input(format!("{}: {e}", p.display())))?,
        (None, None) => return Err(Failure::input("saliency needs --text or --input")),
    };
    if label >= model.spec().n {
        return Err(are_core::Error::Label { label, classes: model.spec().n }.into());
    }
    let mut tokens = tokenize(&text);
    tokens.truncate(cfg.max_len);
    let doc = EncodedDocument::from_tokens(&tokens, &vocab, model.spec().c, label);
    let report = saliency(&model, &doc, &tokens)?;
    Ok(render_saliency(&report, cfg.format)?)
}
