//! The six pipeline commands. Each writes its manifest before any work,
//! communicates with the other stages only via files, and never mutates
//! its inputs.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde_json::json;

use aidetect_core::classifier::cascade_predict;
use aidetect_core::corpus::{
    parse_dataset_path, split_stratified, write_jsonl, CorpusError, SplitSpec, HUMAN_LABEL,
};
use aidetect_core::encoding::{build_encoder, load_encoder, Encoder, EncoderConfig};
use aidetect_core::evaluation::{
    method_table, read_predictions, score, write_predictions, MetricsReport, PredictionRecord,
};
use aidetect_core::reasoning::{
    generate_all, ConditioningMode, GeneratorBackend, HttpBackend, HttpBackendConfig,
    ReasoningCache, RetryPolicy, TemplateBackend,
};
use aidetect_core::training::{self, Checkpoint, Optimizer, RunDir, TrainConfig};

use crate::error::{CliError, Result};
use crate::manifest::RunManifest;
use crate::{
    BackendKind, ConditioningKind, EvaluateArgs, Globals, IngestArgs, OutputFormat, PredictArgs,
    ReasonArgs, ReportArgs, TrainArgs,
};

/// Renders the success line: human text or the artifact JSON.
fn emit(globals: &Globals, text: String, value: &serde_json::Value) {
    match globals.format {
        OutputFormat::Text => println!("{text}"),
        OutputFormat::Json => {
            println!("{}", serde_json::to_string_pretty(value).expect("value serializes"))
        }
    }
}

fn write_json_file(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut body = serde_json::to_string_pretty(value)?;
    body.push('\n');
    fs::write(path, body)?;
    Ok(())
}

fn display(path: &Path) -> String {
    path.display().to_string()
}

pub fn ingest(args: &IngestArgs, globals: &Globals) -> Result<()> {
    let inputs: Vec<&Path> = args.paths.iter().map(PathBuf::as_path).collect();
    let config = json!({
        "paths": args.paths.iter().map(|p| display(p)).collect::<Vec<_>>(),
        "split": args.split.as_ref().map(|f| [f.train, f.val, f.test]),
    });
    let mut manifest = RunManifest::new("ingest", globals.seed, config, &inputs)?;
    manifest.write(&globals.out_dir)?;

    let mut files = Vec::new();
    let mut docs = Vec::new();
    for path in &args.paths {
        let parsed = parse_dataset_path(path)?;
        files.push(json!({ "path": display(path), "rows": parsed.len() }));
        docs.extend(parsed);
    }
    if docs.is_empty() {
        return Err(CorpusError::EmptyCorpus.into());
    }
    let mut seen = HashSet::new();
    let mut duplicates = BTreeSet::new();
    for doc in &docs {
        if !seen.insert(doc.id.as_str()) {
            duplicates.insert(doc.id.clone());
        }
    }
    if !duplicates.is_empty() {
        return Err(CliError::validation(
            "duplicate_id",
            format!("{} document id(s) repeat across the input files", duplicates.len()),
            duplicates.into_iter().collect(),
        ));
    }

    let mut per_class: BTreeMap<String, u64> = BTreeMap::new();
    let (mut human_rows, mut ai_rows, mut unlabeled_rows) = (0u64, 0u64, 0u64);
    for doc in &docs {
        match doc.label_a {
            Some(0) => {
                human_rows += 1;
                *per_class.entry(HUMAN_LABEL.to_string()).or_default() += 1;
            }
            Some(_) => {
                ai_rows += 1;
                if let Some(b) = &doc.label_b {
                    *per_class.entry(b.clone()).or_default() += 1;
                }
            }
            None => unlabeled_rows += 1,
        }
    }

    let corpus_path = globals.out_dir.join("corpus.jsonl");
    let mut buf = Vec::new();
    write_jsonl(&docs, &mut buf)?;
    fs::write(&corpus_path, &buf)?;

    let mut stats = json!({
        "files": files,
        "rows": docs.len(),
        "human_rows": human_rows,
        "ai_rows": ai_rows,
        "unlabeled_rows": unlabeled_rows,
        "per_class": per_class,
    });

    if let Some(fractions) = &args.split {
        let spec = SplitSpec::new(fractions.train, fractions.val, fractions.test, globals.seed)?;
        let split = split_stratified(&docs, &spec)?;
        for (name, subset) in
            [("train", &split.train), ("val", &split.val), ("test", &split.test)]
        {
            let mut buf = Vec::new();
            write_jsonl(subset, &mut buf)?;
            fs::write(globals.out_dir.join(format!("{name}.jsonl")), &buf)?;
        }
        stats.as_object_mut().expect("stats is an object").insert(
            "split".into(),
            json!({
                "train": split.train.len(),
                "val": split.val.len(),
                "test": split.test.len(),
                "warnings": split.warnings,
            }),
        );
    }

    write_json_file(&globals.out_dir.join("stats.json"), &stats)?;
    manifest.finish(&globals.out_dir)?;
    emit(
        globals,
        format!(
            "ingested {} document(s) from {} file(s) into {}",
            docs.len(),
            args.paths.len(),
            display(&corpus_path)
        ),
        &stats,
    );
    Ok(())
}

pub fn reason(args: &ReasonArgs, globals: &Globals) -> Result<()> {
    let mut inputs: Vec<&Path> = vec![args.corpus.as_path()];
    if args.cache.exists() {
        inputs.push(args.cache.as_path());
    }
    let config = json!({
        "corpus": display(&args.corpus),
        "cache": display(&args.cache),
        "backend": args.backend,
        "conditioning": args.conditioning,
        "max_inflight": args.max_inflight,
        "max_retries": args.max_retries,
        "endpoint": args.endpoint,
        "model": args.model,
        "token_env": args.token_env,
        "timeout_secs": args.timeout_secs,
    });
    let mut manifest = RunManifest::new("reason", globals.seed, config, &inputs)?;
    manifest.write(&globals.out_dir)?;

    let docs = parse_dataset_path(&args.corpus)?;
    if docs.is_empty() {
        return Err(CorpusError::EmptyCorpus.into());
    }
    let cache = ReasoningCache::open(&args.cache)?;
    let backend: Box<dyn GeneratorBackend> = match args.backend {
        BackendKind::Template => Box::new(TemplateBackend),
        BackendKind::Http => {
            let config = HttpBackendConfig {
                endpoint: args.endpoint.clone().expect("clap enforces --endpoint"),
                model: args.model.clone().expect("clap enforces --model"),
                token_env: args.token_env.clone(),
                timeout_secs: args.timeout_secs,
            };
            Box::new(HttpBackend::new(config).map_err(|e| CliError::runtime(e.to_string()))?)
        }
    };
    let mode = match args.conditioning {
        ConditioningKind::Gold => ConditioningMode::Gold,
        ConditioningKind::Inference => ConditioningMode::Inference,
    };
    let retry = RetryPolicy { max_retries: args.max_retries, ..RetryPolicy::default() };
    let report = generate_all(&docs, mode, backend.as_ref(), &cache, &retry, args.max_inflight);

    let coverage = serde_json::to_value(&report)?;
    write_json_file(&globals.out_dir.join("coverage.json"), &coverage)?;
    if !report.failed.is_empty() {
        return Err(CliError::runtime(format!(
            "{} of {} reasoning(s) failed; {} success(es) are retained in {}",
            report.failed.len(),
            docs.len(),
            report.generated + report.cached,
            display(&args.cache)
        )));
    }
    manifest.finish(&globals.out_dir)?;
    emit(
        globals,
        format!(
            "reasonings ready: {} generated, {} cached, 0 failed ({} entries in {})",
            report.generated,
            report.cached,
            cache.len(),
            display(&args.cache)
        ),
        &coverage,
    );
    Ok(())
}

pub fn train(args: &TrainArgs, globals: &Globals) -> Result<()> {
    let config = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        learning_rate: args.learning_rate,
        weight_decay: args.weight_decay,
        optimizer: Optimizer::Adam,
        seed: globals.seed,
        threshold: args.threshold,
        use_cot: !args.no_cot,
        early_stop_patience: args.patience,
        aux_reasoning_loss: args.aux_reasoning_loss,
    };
    config.validate()?;
    let cache_path = if config.use_cot {
        match &args.cache {
            None => {
                return Err(CliError::validation(
                    "missing_cache",
                    "training with CoT requires --cache (or pass --no-cot)",
                    vec![],
                ))
            }
            Some(path) if !path.exists() => {
                return Err(CliError::validation(
                    "missing_cache",
                    format!("reasoning cache {} does not exist", path.display()),
                    vec![],
                ))
            }
            Some(path) => Some(path.clone()),
        }
    } else {
        None
    };

    let mut inputs: Vec<&Path> = vec![args.train.as_path(), args.val.as_path()];
    if let Some(path) = &cache_path {
        inputs.push(path.as_path());
    }
    if let Some(dir) = &args.encoder_dir {
        inputs.push(dir.as_path());
    }
    let mut manifest_config = serde_json::to_value(&config)?;
    let fields = manifest_config.as_object_mut().expect("config is an object");
    fields.insert("train".into(), json!(display(&args.train)));
    fields.insert("val".into(), json!(display(&args.val)));
    fields.insert("cache".into(), json!(cache_path.as_deref().map(display)));
    fields.insert("backend_id".into(), json!(args.backend_id));
    fields.insert("embedding_dim".into(), json!(args.dim));
    fields.insert("encoder_dir".into(), json!(args.encoder_dir.as_deref().map(display)));
    fields.insert("resume".into(), json!(args.resume));
    let mut manifest = RunManifest::new("train", globals.seed, manifest_config, &inputs)?;
    manifest.write(&globals.out_dir)?;

    let train_docs = parse_dataset_path(&args.train)?;
    let val_docs = parse_dataset_path(&args.val)?;
    let cache = match &cache_path {
        Some(path) => ReasoningCache::open(path)?,
        None => ReasoningCache::in_memory(),
    };

    let run_dir = RunDir::new(globals.out_dir.clone());
    let run = if args.resume {
        let checkpoint_dir = run_dir.checkpoint_dir();
        if !checkpoint_dir.join("meta.json").exists() {
            return Err(CliError::validation(
                "missing_checkpoint",
                format!("no checkpoint to resume at {}", checkpoint_dir.display()),
                vec![],
            ));
        }
        let encoder = load_encoder(&Checkpoint::encoder_dir(&checkpoint_dir))?;
        training::resume(
            &checkpoint_dir,
            &train_docs,
            &val_docs,
            &cache,
            &args.backend_id,
            encoder.as_ref(),
            &config,
            Some(&run_dir),
        )?
    } else {
        let encoder: Box<dyn Encoder> = match &args.encoder_dir {
            Some(dir) => load_encoder(dir)?,
            None => build_encoder(&EncoderConfig::hashed(args.dim), None)?,
        };
        training::train(
            &train_docs,
            &val_docs,
            &cache,
            &args.backend_id,
            encoder.as_ref(),
            &config,
            Some(&run_dir),
        )?
    };
    manifest.finish(&globals.out_dir)?;

    let meta = &run.checkpoint.meta;
    let summary = json!({
        "best_epoch": meta.epoch,
        "val_f1_a": meta.val_f1_a,
        "val_f1_b": meta.val_f1_b,
        "epochs_run": run.history.len(),
        "checkpoint": display(&run_dir.checkpoint_dir()),
    });
    emit(
        globals,
        format!(
            "best epoch {}: val Task-A F1 {:.4}, Task-B F1 {:.4} (checkpoint at {})",
            meta.epoch,
            meta.val_f1_a,
            meta.val_f1_b,
            display(&run_dir.checkpoint_dir())
        ),
        &summary,
    );
    Ok(())
}

pub fn predict(args: &PredictArgs, globals: &Globals) -> Result<()> {
    if !args.checkpoint.join("meta.json").exists() {
        return Err(CliError::validation(
            "missing_checkpoint",
            format!("no checkpoint at {}", args.checkpoint.display()),
            vec![],
        ));
    }
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let use_cot = checkpoint.meta.use_cot;
    let cache_path = if use_cot {
        match &args.cache {
            None => {
                return Err(CliError::validation(
                    "missing_cache",
                    "this checkpoint was trained with CoT; pass --cache with inference-conditioned reasonings",
                    vec![],
                ))
            }
            Some(path) if !path.exists() => {
                return Err(CliError::validation(
                    "missing_cache",
                    format!("reasoning cache {} does not exist", path.display()),
                    vec![],
                ))
            }
            Some(path) => Some(path.clone()),
        }
    } else {
        None
    };

    let mut inputs: Vec<&Path> = vec![args.checkpoint.as_path(), args.corpus.as_path()];
    if let Some(path) = &cache_path {
        inputs.push(path.as_path());
    }
    let config = json!({
        "checkpoint": display(&args.checkpoint),
        "corpus": display(&args.corpus),
        "cache": cache_path.as_deref().map(display),
        "backend_id": args.backend_id,
        "use_cot": use_cot,
        "threshold": checkpoint.meta.threshold,
    });
    let mut manifest = RunManifest::new("predict", globals.seed, config, &inputs)?;
    manifest.write(&globals.out_dir)?;

    let docs = parse_dataset_path(&args.corpus)?;
    if docs.is_empty() {
        return Err(CorpusError::EmptyCorpus.into());
    }
    let cache = match &cache_path {
        Some(path) => ReasoningCache::open(path)?,
        None => ReasoningCache::in_memory(),
    };
    let encoder = load_encoder(&Checkpoint::encoder_dir(&args.checkpoint))?;
    let features = training::prepare_inference_features(
        &docs,
        &cache,
        &args.backend_id,
        encoder.as_ref(),
        use_cot,
    )?;

    let mut records = Vec::with_capacity(docs.len());
    for (doc, embedding) in docs.iter().zip(&features) {
        let prediction = cascade_predict(
            &doc.id,
            embedding,
            &checkpoint.task_a,
            &checkpoint.task_b,
            &checkpoint.vocab,
            checkpoint.meta.threshold,
        )?;
        records.push(PredictionRecord::from(&prediction));
    }
    let out_path = globals.out_dir.join("predictions.jsonl");
    let mut buf = Vec::new();
    write_predictions(&records, &mut buf)?;
    fs::write(&out_path, &buf)?;
    manifest.finish(&globals.out_dir)?;

    let ai_rows = records.iter().filter(|r| r.label_a == 1).count();
    emit(
        globals,
        format!(
            "wrote {} prediction(s) to {} ({} AI, {} human)",
            records.len(),
            display(&out_path),
            ai_rows,
            records.len() - ai_rows
        ),
        &json!({
            "rows": records.len(),
            "ai_rows": ai_rows,
            "human_rows": records.len() - ai_rows,
            "path": display(&out_path),
        }),
    );
    Ok(())
}

pub fn evaluate(args: &EvaluateArgs, globals: &Globals) -> Result<()> {
    let inputs: Vec<&Path> = vec![args.predictions.as_path(), args.gold.as_path()];
    let config = json!({
        "predictions": display(&args.predictions),
        "gold": display(&args.gold),
    });
    let mut manifest = RunManifest::new("evaluate", globals.seed, config, &inputs)?;
    manifest.write(&globals.out_dir)?;

    let predictions = read_predictions(BufReader::new(fs::File::open(&args.predictions)?))?;
    let golds = parse_dataset_path(&args.gold)?;
    let mut report = score(&predictions, &golds)?;
    report.metadata.insert("predictions".into(), display(&args.predictions));
    report.metadata.insert("gold".into(), display(&args.gold));

    let value = serde_json::to_value(&report)?;
    write_json_file(&globals.out_dir.join("metrics.json"), &value)?;
    manifest.finish(&globals.out_dir)?;
    emit(
        globals,
        format!(
            "Task-A F1 {:.4}, Task-B macro-F1 {:.4} over {} document(s) ({} skipped unlabeled)",
            report.task_a_f1, report.task_b_f1, report.n_scored, report.n_skipped_unlabeled
        ),
        &value,
    );
    Ok(())
}

pub fn report(args: &ReportArgs, globals: &Globals) -> Result<()> {
    let mut named_paths: Vec<(String, PathBuf)> = Vec::new();
    for spec in &args.run {
        let Some((name, path)) = spec.split_once('=') else {
            return Err(CliError::validation(
                "invalid_run_spec",
                format!("--run expects NAME=metrics.json, got {spec:?}"),
                vec![],
            ));
        };
        if name.is_empty() || path.is_empty() {
            return Err(CliError::validation(
                "invalid_run_spec",
                format!("--run expects NAME=metrics.json, got {spec:?}"),
                vec![],
            ));
        }
        if named_paths.iter().any(|(n, _)| n == name) {
            return Err(CliError::validation(
                "duplicate_run_name",
                format!("run name {name:?} given more than once"),
                vec![name.to_string()],
            ));
        }
        named_paths.push((name.to_string(), PathBuf::from(path)));
    }
    let inputs: Vec<&Path> = named_paths.iter().map(|(_, p)| p.as_path()).collect();
    let config = json!({
        "runs": named_paths
            .iter()
            .map(|(n, p)| json!({ "name": n, "metrics": display(p) }))
            .collect::<Vec<_>>(),
    });
    let mut manifest = RunManifest::new("report", globals.seed, config, &inputs)?;
    manifest.write(&globals.out_dir)?;

    let mut reports: BTreeMap<String, MetricsReport> = BTreeMap::new();
    for (name, path) in &named_paths {
        let text = fs::read_to_string(path)?;
        let parsed: MetricsReport = serde_json::from_str(&text).map_err(|e| {
            CliError::validation(
                "malformed_metrics",
                format!("{}: {e}", path.display()),
                vec![],
            )
        })?;
        reports.insert(name.clone(), parsed);
    }
    let table = method_table(&reports)?;
    let value = serde_json::to_value(&table)?;
    write_json_file(&globals.out_dir.join("report.json"), &value)?;
    fs::write(globals.out_dir.join("report.txt"), table.to_text())?;
    manifest.finish(&globals.out_dir)?;
    emit(globals, table.to_text().trim_end().to_string(), &value);
    Ok(())
}
