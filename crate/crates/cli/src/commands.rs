use std::fs;
use std::path::{Path, PathBuf};

use fusemerge::fusion::io::{load_dist, save_dist, DistFile};
use fusemerge::fusion::{align_tokens, build_vocab_map, project_distribution};
use fusemerge::merge::{delta_stats, merge, MergeConfig, Method};
use fusemerge::train::data::parse_dialogues;
use fusemerge::train::{
    evaluate, fused_targets, ingest_dialogues, load_teachers, shifted_labels, teacher_path, train, CharVocab,
    TrainConfig,
};
use fusemerge::{
    load_checkpoint, partition_units, save_checkpoint, with_dtype, Checkpoint, DistMatrix, Element, LayerPattern,
    ToyLm,
};
use serde_json::{json, Value};

use crate::config::{require_files, CliConfig};
use crate::error::CliError;
use crate::{
    subcommand_usage, AlignArgs, Command, ExportDistsArgs, FuseTrainArgs, InitPivotArgs, InspectArgs, MergeArgs,
    SweepArgs,
};

/// Metadata key holding a model's vocabulary as a JSON list.
const VOCAB_KEY: &str = "vocab";

pub(crate) fn execute(command: Command) -> Result<Value, CliError> {
    match command {
        Command::Merge(a) => cmd_merge(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::FuseTrain(a) => cmd_fuse_train(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::Align(a) => cmd_align(a),
        Command::InitPivot(a) => cmd_init_pivot(a),
        Command::ExportDists(a) => cmd_export_dists(a),
    }
}

fn missing(flag: &str, command: &str) -> CliError {
    CliError::Usage {
        message: format!("missing required {flag}"),
        usage: Some(subcommand_usage(command)),
    }
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn read_json_list<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::io(format!("{} is not a JSON list: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(format!("cannot create {}: {e}", dir.display())))
}

fn model_vocab(ckpt: &Checkpoint, path: &Path) -> Result<CharVocab, CliError> {
    let raw = ckpt.metadata.get(VOCAB_KEY).ok_or_else(|| {
        CliError::io(format!(
            "{} has no `{VOCAB_KEY}` metadata; create models with init-pivot",
            path.display()
        ))
    })?;
    let tokens: Vec<String> = serde_json::from_str(raw)
        .map_err(|e| CliError::io(format!("{}: bad `{VOCAB_KEY}` metadata: {e}", path.display())))?;
    CharVocab::from_tokens(tokens).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn model_dtype(ckpt: &Checkpoint, path: &Path) -> Result<fusemerge::DType, CliError> {
    ckpt.get(fusemerge::train::EMBED)
        .map(|t| t.dtype())
        .ok_or_else(|| CliError::io(format!("{} is not a model checkpoint", path.display())))
}

struct MergeInputs {
    config: MergeConfig,
    base: Option<PathBuf>,
    targets: Vec<PathBuf>,
}

fn load_merge_inputs(inputs: &MergeInputs) -> Result<(Option<Checkpoint>, Vec<Checkpoint>), CliError> {
    require_files(inputs.base.iter().chain(&inputs.targets).map(PathBuf::as_path))?;
    let base = inputs.base.as_ref().map(load_checkpoint).transpose()?;
    let targets = inputs
        .targets
        .iter()
        .map(load_checkpoint)
        .collect::<Result<Vec<_>, _>>()?;
    Ok((base, targets))
}

fn run_merge(
    config: &MergeConfig,
    base: Option<&Checkpoint>,
    targets: &[Checkpoint],
    out: &Path,
) -> Result<Value, CliError> {
    let outcome = merge(base, targets, config)?;
    save_checkpoint(&outcome.checkpoint, out)?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    let mut report = json!({
        "method": config.method.as_str(),
        "out": path_str(out),
        "config": config,
        "warnings": outcome.warnings,
    });
    if let Some(weights) = &outcome.weights {
        report["granularity"] = json!(config.granularity);
        report["units"] = json!(weights.to_report());
    }
    Ok(report)
}

fn cmd_merge(a: MergeArgs) -> Result<Value, CliError> {
    let cfg = CliConfig::load(a.config.as_deref())?;
    let mut m = cfg.merge;
    if let Some(v) = a.method {
        m.method = v;
    }
    if let Some(v) = a.granularity {
        m.granularity = v;
    }
    if let Some(v) = a.weight_mode {
        m.weight_mode = v;
    }
    if let Some(v) = a.temperature {
        m.temperature = v;
    }
    if a.coeffs.is_some() {
        m.coeffs = a.coeffs;
    }
    if let Some(v) = a.t {
        m.t = v;
    }
    if let Some(v) = a.scale {
        m.scale = v;
    }
    if let Some(v) = a.density {
        m.density = v;
    }
    if let Some(v) = a.drop_rate {
        m.drop_rate = v;
    }
    if let Some(v) = a.seed {
        m.seed = v;
    }
    if let Some(v) = a.layer_pattern {
        m.layer_pattern = v;
    }
    if a.include.is_some() {
        m.include = a.include;
    }
    let inputs = MergeInputs {
        config: m,
        base: a.base.or(cfg.paths.base),
        targets: if a.targets.is_empty() { cfg.paths.targets } else { a.targets },
    };
    let out = a.out.or(cfg.paths.out).ok_or_else(|| missing("--out", "merge"))?;
    if inputs.targets.is_empty() {
        return Err(missing("--targets", "merge"));
    }
    if inputs.config.method.needs_base() && inputs.base.is_none() {
        return Err(missing(
            &format!("--base (method `{}` merges deltas from a base)", inputs.config.method),
            "merge",
        ));
    }
    inputs.config.validate()?;
    let (base, targets) = load_merge_inputs(&inputs)?;
    run_merge(&inputs.config, base.as_ref(), &targets, &out)
}

fn cmd_sweep(a: SweepArgs) -> Result<Value, CliError> {
    let cfg = CliConfig::load(a.config.as_deref())?;
    let mut m = cfg.merge;
    m.method = Method::Varm;
    if let Some(v) = a.weight_mode {
        m.weight_mode = v;
    }
    if let Some(v) = a.temperature {
        m.temperature = v;
    }
    if let Some(v) = a.layer_pattern {
        m.layer_pattern = v;
    }
    if a.include.is_some() {
        m.include = a.include;
    }
    let inputs = MergeInputs {
        config: m,
        base: a.base.or(cfg.paths.base),
        targets: if a.targets.is_empty() { cfg.paths.targets } else { a.targets },
    };
    let out_dir = a.out_dir.or(cfg.paths.out_dir).ok_or_else(|| missing("--out-dir", "sweep"))?;
    if inputs.base.is_none() {
        return Err(missing("--base", "sweep"));
    }
    if inputs.targets.is_empty() {
        return Err(missing("--targets", "sweep"));
    }
    inputs.config.validate()?;
    let (base, targets) = load_merge_inputs(&inputs)?;
    create_dir(&out_dir)?;
    let mut runs = Vec::new();
    for g in fusemerge::Granularity::ALL {
        let mut config = inputs.config.clone();
        config.granularity = g;
        let out = out_dir.join(format!("varm_{g}.st"));
        runs.push(run_merge(&config, base.as_ref(), &targets, &out)?);
    }
    Ok(json!({ "runs": runs }))
}

fn cmd_fuse_train(a: FuseTrainArgs) -> Result<Value, CliError> {
    let cfg = CliConfig::load(a.config.as_deref())?;
    let mut t = cfg.train;
    if let Some(v) = a.lambda {
        t.lambda = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch {
        t.batch = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.block_len {
        t.block_len = v;
    }
    if let Some(v) = a.mince {
        t.mince = v;
    }
    let pivot_path = a.pivot.or(cfg.paths.pivot).ok_or_else(|| missing("--pivot", "fuse-train"))?;
    let teacher_dir = a
        .teacher_dir
        .or(cfg.paths.teacher_dir)
        .ok_or_else(|| missing("--teacher-dir", "fuse-train"))?;
    let corpus_path = a.corpus.or(cfg.paths.corpus).ok_or_else(|| missing("--corpus", "fuse-train"))?;
    let out = a.out.or(cfg.paths.out).ok_or_else(|| missing("--out", "fuse-train"))?;
    let log_path = a
        .log
        .or(cfg.paths.log)
        .unwrap_or_else(|| out.with_extension("log.json"));
    t.validate()?;
    require_files([pivot_path.as_path(), teacher_dir.as_path(), corpus_path.as_path()])?;

    let pivot = load_checkpoint(&pivot_path)?;
    let vocab = model_vocab(&pivot, &pivot_path)?;
    let corpus = ingest_dialogues(&corpus_path, &vocab, t.block_len)?;
    let teachers = load_teachers(&teacher_dir, corpus.len())?;

    let (mut trained, log, final_loss) = with_dtype!(model_dtype(&pivot, &pivot_path)?, T => {
        fuse_train_typed::<T>(&pivot, &teachers, &corpus, &t)?
    });
    if !final_loss.is_finite() {
        return Err(CliError::NonFinite(format!("final loss is {final_loss}")));
    }
    trained.metadata = pivot.metadata.clone();
    trained
        .metadata
        .insert("fusion.config".into(), serde_json::to_string(&t).expect("config serializes"));
    save_checkpoint(&trained, &out)?;

    let log_doc = json!({
        "config": t,
        "samples": corpus.len(),
        "epochs": log,
        "final_loss": final_loss,
    });
    fs::write(&log_path, serde_json::to_string_pretty(&log_doc).expect("log serializes"))
        .map_err(|e| CliError::io(format!("cannot write {}: {e}", log_path.display())))?;
    Ok(json!({
        "out": path_str(&out),
        "log": path_str(&log_path),
        "samples": corpus.len(),
        "epochs": t.epochs,
        "final_loss": final_loss,
    }))
}

fn fuse_train_typed<T: Element>(
    pivot: &Checkpoint,
    teachers: &[DistMatrix<f64>],
    corpus: &[fusemerge::train::DialogueSample],
    config: &TrainConfig,
) -> Result<(Checkpoint, Vec<fusemerge::train::EpochLog>, f64), CliError> {
    let model = ToyLm::<T>::from_checkpoint(pivot)?;
    let teachers: Vec<DistMatrix<T>> = teachers.iter().map(DistMatrix::cast).collect();
    let fused = fused_targets(&model, &teachers, corpus, config.mince)?;
    let outcome = train(&model, corpus, Some(&fused), config)?;
    let final_loss = evaluate(&outcome.model, corpus, Some(&fused), config.lambda)?;
    Ok((outcome.model.to_checkpoint(), outcome.log, final_loss))
}

fn cmd_inspect(a: InspectArgs) -> Result<Value, CliError> {
    require_files(std::iter::once(a.ckpt.as_path()).chain(a.delta_against.as_deref()))?;
    let ckpt = load_checkpoint(&a.ckpt)?;
    let tensors: Vec<Value> = ckpt
        .tensors
        .iter()
        .map(|(name, t)| json!({ "name": name, "dtype": t.dtype().as_str(), "shape": t.shape() }))
        .collect();
    let mut report = json!({
        "path": path_str(&a.ckpt),
        "tensors": tensors,
        "num_scalars": ckpt.num_scalars(),
        "metadata": ckpt.metadata,
    });
    if let Some(base_path) = &a.delta_against {
        let base = load_checkpoint(base_path)?;
        let pattern = LayerPattern::new(&a.layer_pattern).map_err(|e| CliError::usage(e.to_string()))?;
        let partition = partition_units(&base, a.granularity, &pattern);
        let stats = delta_stats(&base, &ckpt, &partition)?;
        let units: Vec<Value> = stats
            .unit_ids
            .iter()
            .zip(&stats.units)
            .map(|(id, u)| json!({ "unit": id, "mean_sq": u.mean_sq, "mean_abs": u.mean_abs, "count": u.count }))
            .collect();
        report["delta"] = json!({
            "against": path_str(base_path),
            "granularity": a.granularity,
            "units": units,
        });
    }
    Ok(report)
}

fn cmd_align(a: AlignArgs) -> Result<Value, CliError> {
    if a.top_k == 0 {
        return Err(CliError::usage("--top-k must be at least 1"));
    }
    require_files(
        [a.source_dist.as_path(), a.pivot_tokens.as_path(), a.pivot_vocab.as_path()]
            .into_iter()
            .chain(a.source_tokens.as_deref())
            .chain(a.source_vocab.as_deref())
            .chain(a.pivot_gold.as_deref()),
    )?;
    let source = load_dist(&a.source_dist)?;
    let source_tokens: Vec<String> = match &a.source_tokens {
        Some(p) => read_json_list(p)?,
        None => source.tokens.clone(),
    };
    let pivot_tokens: Vec<String> = read_json_list(&a.pivot_tokens)?;
    if source_tokens.is_empty() || pivot_tokens.is_empty() {
        return Err(CliError::usage("source and pivot token lists must be non-empty"));
    }
    if source_tokens.len() != source.matrix.rows() {
        return Err(CliError::io(format!(
            "{} source tokens for {} distribution rows",
            source_tokens.len(),
            source.matrix.rows()
        )));
    }
    let pivot_vocab: Vec<String> = read_json_list(&a.pivot_vocab)?;
    let source_vocab: Vec<String> = match (&a.source_vocab, &source.vocab) {
        (Some(p), _) => read_json_list(p)?,
        (None, Some(v)) => v.clone(),
        (None, None) => {
            return Err(CliError::usage(
                "source vocabulary unknown: pass --source-vocab or store `vocab` in the distribution file",
            ))
        }
    };
    if source_vocab.len() != source.matrix.cols() {
        return Err(CliError::io(format!(
            "source vocabulary has {} entries for {} columns",
            source_vocab.len(),
            source.matrix.cols()
        )));
    }
    let gold: Option<Vec<usize>> = a.pivot_gold.as_deref().map(read_json_list).transpose()?;

    let map = align_tokens(&source_tokens, &pivot_tokens).with_vocab_map(build_vocab_map(&source_vocab, &pivot_vocab));
    let projected = project_distribution(
        &source.matrix,
        &map,
        pivot_tokens.len(),
        pivot_vocab.len(),
        a.top_k,
        gold.as_deref(),
    )?;
    let out = DistFile {
        matrix: projected,
        tokens: pivot_tokens,
        gold,
        vocab: Some(pivot_vocab),
    };
    save_dist(&out, &a.out)?;
    Ok(json!({
        "out": path_str(&a.out),
        "pairs": map.pairs,
        "mapped_vocab": map.vocab_map.len(),
        "rows": out.matrix.rows(),
        "cols": out.matrix.cols(),
    }))
}

fn cmd_init_pivot(a: InitPivotArgs) -> Result<Value, CliError> {
    if a.dim == 0 {
        return Err(CliError::usage("--dim must be at least 1"));
    }
    if !(a.scale.is_finite() && a.scale >= 0.0) {
        return Err(CliError::usage("--scale must be a non-negative number"));
    }
    require_files([a.corpus.as_path()])?;
    let text = fs::read_to_string(&a.corpus).map_err(|e| CliError::io(format!("cannot read {}: {e}", a.corpus.display())))?;
    let dialogues = parse_dialogues(&text)?;
    let vocab = CharVocab::from_texts(dialogues.iter().flat_map(|d| d.turns.iter().map(|t| t.text.as_str())));
    let mut ckpt = with_dtype!(a.dtype, T => {
        ToyLm::<T>::random(vocab.len(), a.dim, a.scale, a.seed).to_checkpoint()
    });
    ckpt.metadata
        .insert(VOCAB_KEY.into(), serde_json::to_string(vocab.tokens()).expect("vocab serializes"));
    save_checkpoint(&ckpt, &a.out)?;
    Ok(json!({
        "out": path_str(&a.out),
        "vocab_size": vocab.len(),
        "dim": a.dim,
        "dtype": a.dtype.as_str(),
    }))
}

fn cmd_export_dists(a: ExportDistsArgs) -> Result<Value, CliError> {
    require_files([a.model.as_path(), a.corpus.as_path()])?;
    let ckpt = load_checkpoint(&a.model)?;
    let vocab = model_vocab(&ckpt, &a.model)?;
    let corpus = ingest_dialogues(&a.corpus, &vocab, a.block_len)?;
    let model = with_dtype!(model_dtype(&ckpt, &a.model)?, T => {
        let m = ToyLm::<T>::from_checkpoint(&ckpt)?;
        corpus
            .iter()
            .map(|s| Ok(m.forward(&s.token_ids)?.cast::<f64>()))
            .collect::<Result<Vec<DistMatrix<f64>>, CliError>>()?
    });
    create_dir(&a.out_dir)?;
    for (i, (sample, matrix)) in corpus.iter().zip(model).enumerate() {
        let file = DistFile {
            matrix,
            tokens: sample.token_ids.iter().map(|&id| vocab.token(id).to_string()).collect(),
            gold: Some(shifted_labels(sample).token_ids),
            vocab: Some(vocab.tokens().to_vec()),
        };
        save_dist(&file, teacher_path(&a.out_dir, i))?;
    }
    Ok(json!({ "out_dir": path_str(&a.out_dir), "samples": corpus.len() }))
}
